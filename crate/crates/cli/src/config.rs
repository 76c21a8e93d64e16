//! Flat key = value experiment configuration.
//!
//! One file drives every subcommand: training, partitioning, analysis and
//! the configuration search all read from the same schema, so a single
//! config describes a complete experiment. Lines are `key = value`, blank
//! lines and `#` comments are ignored, keys may appear at most once, and
//! any key outside the schema is rejected by name.

use std::collections::BTreeMap;
use std::fmt::Debug;
use std::path::Path;
use std::str::FromStr;

use tsfl_core::analysis::{SearchLimits, SearchSpace};
use tsfl_core::compress::{BitWidth, CompressionConfig};
use tsfl_core::model::{LoraSite, ModelConfig};
use tsfl_core::sim::{CostModel, TrainConfig};

/// Every key the parser accepts. Grouped by the subcommands that read them;
/// unused keys are legal so one file can serve all commands.
const KNOWN_KEYS: &[&str] = &[
    // randomness
    "seed",
    // model
    "blocks",
    "embed_dim",
    "patch_tokens",
    "patch_dim",
    "heads",
    "rank",
    "classes",
    "cut",
    "lora_scale",
    // synthetic data
    "samples",
    "train_samples",
    "noise",
    // partition
    "clients",
    "alpha",
    // training
    "rounds",
    "local_steps",
    "batch",
    "eta",
    "clients_per_round",
    "kept",
    "q",
    // cost model
    "base_device_flops",
    "server_flops",
    "bandwidth_mbps",
    // penalty constants
    "sigma_sq",
    "gamma",
    "kappa",
    "upsilon",
    "psi",
    "lambda",
    // search space and budgets
    "search_cuts",
    "search_kept",
    "search_widths",
    "payload_cap_bits",
    "memory_cap_bytes",
];

/// Parsed config: raw strings keyed by name, typed on access.
pub struct Config {
    map: BTreeMap<String, String>,
}

pub fn load(path: &Path) -> Result<Config, String> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
    let mut map = BTreeMap::new();
    for (ln, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| format!("line {}: expected `key = value`, got `{line}`", ln + 1))?;
        let (key, value) = (key.trim(), value.trim());
        if !KNOWN_KEYS.contains(&key) {
            return Err(format!("unknown key `{key}` (line {})", ln + 1));
        }
        if map.insert(key.to_string(), value.to_string()).is_some() {
            return Err(format!("duplicate key `{key}` (line {})", ln + 1));
        }
    }
    Ok(Config { map })
}

impl Config {
    fn raw(&self, key: &str) -> Result<&str, String> {
        self.map
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| format!("missing key `{key}`"))
    }

    pub fn get<T>(&self, key: &str) -> Result<T, String>
    where
        T: FromStr,
        T::Err: Debug,
    {
        parse_as(key, self.raw(key)?)
    }

    pub fn get_or<T>(&self, key: &str, default: T) -> Result<T, String>
    where
        T: FromStr,
        T::Err: Debug,
    {
        match self.map.get(key) {
            Some(v) => parse_as(key, v),
            None => Ok(default),
        }
    }

    pub fn get_opt<T>(&self, key: &str) -> Result<Option<T>, String>
    where
        T: FromStr,
        T::Err: Debug,
    {
        self.map.get(key).map(|v| parse_as(key, v)).transpose()
    }

    /// Comma-separated list.
    pub fn list<T>(&self, key: &str) -> Result<Vec<T>, String>
    where
        T: FromStr,
        T::Err: Debug,
    {
        let vals: Result<Vec<T>, String> = self
            .raw(key)?
            .split(',')
            .map(|part| parse_as(key, part.trim()))
            .collect();
        let vals = vals?;
        if vals.is_empty() {
            return Err(format!("key `{key}` must list at least one value"));
        }
        Ok(vals)
    }

    /// Scalar broadcast to `n` entries, or a comma list of exactly `n`.
    pub fn per_client(&self, key: &str, n: usize, default: f64) -> Result<Vec<f64>, String> {
        let Some(rawv) = self.map.get(key) else {
            return Ok(vec![default; n]);
        };
        let vals: Vec<f64> = rawv
            .split(',')
            .map(|part| parse_as(key, part.trim()))
            .collect::<Result<_, _>>()?;
        match vals.len() {
            1 => Ok(vec![vals[0]; n]),
            len if len == n => Ok(vals),
            len => Err(format!(
                "key `{key}` must give 1 or {n} values, got {len}"
            )),
        }
    }

    pub fn seed(&self) -> Result<u64, String> {
        self.get("seed")
    }

    pub fn model(&self) -> Result<ModelConfig, String> {
        let cfg = ModelConfig {
            blocks: self.get("blocks")?,
            embed_dim: self.get("embed_dim")?,
            patch_tokens: self.get("patch_tokens")?,
            patch_dim: self.get("patch_dim")?,
            heads: self.get("heads")?,
            rank: self.get("rank")?,
            classes: self.get("classes")?,
            cut: self.get("cut")?,
            lora_site: LoraSite::Query,
            lora_scale: self.get_or("lora_scale", 1.0)?,
        };
        cfg.validate().map_err(|e| format!("model config: {e}"))?;
        Ok(cfg)
    }

    pub fn train(&self) -> Result<TrainConfig, String> {
        Ok(TrainConfig {
            rounds: self.get("rounds")?,
            local_steps: self.get("local_steps")?,
            batch: self.get("batch")?,
            eta: self.get("eta")?,
            clients_per_round: self.get("clients_per_round")?,
            compression: CompressionConfig {
                kept: self.get("kept")?,
                bit_width: bit_width("q", self.get("q")?)?,
            },
        })
    }

    pub fn cost(&self) -> Result<CostModel, String> {
        let d = CostModel::default();
        Ok(CostModel {
            base_device_flops: self.get_or("base_device_flops", d.base_device_flops)?,
            server_flops: self.get_or("server_flops", d.server_flops)?,
            bandwidth_mbps: self.get_or("bandwidth_mbps", d.bandwidth_mbps)?,
        })
    }

    pub fn space(&self) -> Result<SearchSpace, String> {
        let widths: Vec<u32> = self.list("search_widths")?;
        Ok(SearchSpace {
            cuts: self.list("search_cuts")?,
            kept: self.list("search_kept")?,
            widths: widths
                .into_iter()
                .map(|q| bit_width("search_widths", q))
                .collect::<Result<_, _>>()?,
        })
    }

    pub fn limits(&self) -> Result<SearchLimits, String> {
        Ok(SearchLimits {
            payload_cap_bits: self.get_or("payload_cap_bits", u64::MAX)?,
            memory_cap_bytes: self.get_or("memory_cap_bytes", u64::MAX)?,
        })
    }
}

fn parse_as<T>(key: &str, raw: &str) -> Result<T, String>
where
    T: FromStr,
    T::Err: Debug,
{
    raw.parse()
        .map_err(|e| format!("invalid value for key `{key}`: `{raw}` ({e:?})"))
}

pub fn bit_width(key: &str, q: u32) -> Result<BitWidth, String> {
    let narrow =
        u8::try_from(q).map_err(|_| format!("invalid value for key `{key}`: `{q}`"))?;
    BitWidth::from_bits(narrow).map_err(|e| format!("invalid value for key `{key}`: {e}"))
}
