//! Subcommand implementations.
//!
//! Every command prints a single JSON line to stdout on success (plus any
//! files it was asked to write) and maps failures onto two exit classes:
//! usage errors (bad flags, bad config, missing inputs) and runtime errors
//! (a computation or encode/decode that legitimately failed).

use std::fmt;
use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use tsfl_core::analysis::{delta, grid_search, measure_constants, AnalysisError, BoundConstants};
use tsfl_core::compress::{dequantize, QuantizedActivations};
use tsfl_core::data::{dirichlet_partition, synthetic, Dataset};
use tsfl_core::model::{init_model, LoraAdapter, ModelConfig, SplitModel};
use tsfl_core::rng::{Rng, STREAM_DATA, STREAM_INIT, STREAM_PARTITION};
use tsfl_core::sim::{write_metrics_jsonl, write_summary_csv, Trainer};
use tsfl_core::tensor::Tensor;
use tsfl_core::wire::{
    compression_ratio, decode_activations, decode_adapters, decode_gradient, encode_activations,
    encode_adapters, encode_gradient, golden_vectors, metadata_bits, payload_bits, WireMeta,
};

use crate::config::{self, Config};

/// Failures, split by exit code: usage errors exit 2, runtime errors 1.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Run(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Run(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Run(m) => write!(f, "{m}"),
        }
    }
}

fn usage(m: impl fmt::Display) -> CliError {
    CliError::Usage(m.to_string())
}

fn run_err(m: impl fmt::Display) -> CliError {
    CliError::Run(m.to_string())
}

fn load_config(path: &Path) -> Result<Config, CliError> {
    config::load(path).map_err(usage)
}

/// Deterministic experiment inputs shared by train/partition/analyze/search:
/// the synthetic task, its train/eval split and the client shards, all drawn
/// from the config's single seed on fixed, named streams.
struct Experiment {
    train: Dataset,
    eval: Option<Dataset>,
    shards: Vec<Vec<usize>>,
    clients: usize,
    alpha: f64,
}

fn experiment(cfg: &Config, mc: &ModelConfig, seed: u64) -> Result<Experiment, CliError> {
    let samples: usize = cfg.get("samples").map_err(usage)?;
    let train_samples: usize = cfg.get_or("train_samples", samples).map_err(usage)?;
    if train_samples == 0 || train_samples > samples {
        return Err(usage(format!(
            "invalid value for key `train_samples`: `{train_samples}` (need 1..={samples})"
        )));
    }
    let noise: f64 = cfg.get("noise").map_err(usage)?;
    let clients: usize = cfg.get("clients").map_err(usage)?;
    let alpha: f64 = cfg.get("alpha").map_err(usage)?;

    let mut drng = Rng::derive(seed, &[STREAM_DATA]);
    let full = synthetic(mc.classes, mc.input_width(), samples, noise, &mut drng)
        .map_err(run_err)?;
    let (tf, tl) = full.gather(&(0..train_samples).collect::<Vec<_>>());
    let train = Dataset::new(tf, tl, full.classes()).map_err(run_err)?;
    let eval = if train_samples < samples {
        let (ef, el) = full.gather(&(train_samples..samples).collect::<Vec<_>>());
        Some(Dataset::new(ef, el, full.classes()).map_err(run_err)?)
    } else {
        None
    };
    let mut prng = Rng::derive(seed, &[STREAM_PARTITION]);
    let shards = dirichlet_partition(&train, clients, alpha, &mut prng).map_err(run_err)?;
    Ok(Experiment {
        train,
        eval,
        shards,
        clients,
        alpha,
    })
}

// ---------------------------------------------------------------------------
// train

pub fn train(
    config_path: &Path,
    out_dir: &Path,
    save_model: Option<&Path>,
) -> Result<(), CliError> {
    let cfg = load_config(config_path)?;
    let seed = cfg.seed().map_err(usage)?;
    let mc = cfg.model().map_err(usage)?;
    let tc = cfg.train().map_err(usage)?;
    let cost = cfg.cost().map_err(usage)?;
    let exp = experiment(&cfg, &mc, seed)?;

    let mut irng = Rng::derive(seed, &[STREAM_INIT]);
    let model = init_model(&mc, &mut irng).map_err(run_err)?;
    let mut trainer = Trainer::new(
        model,
        &exp.train,
        exp.eval.as_ref(),
        exp.shards,
        tc,
        cost,
        seed,
    )
    .map_err(usage)?;
    let metrics = trainer.run().map_err(run_err)?;

    fs::create_dir_all(out_dir)
        .map_err(|e| run_err(format!("cannot create {}: {e}", out_dir.display())))?;
    let jsonl = out_dir.join("metrics.jsonl");
    let csv = out_dir.join("summary.csv");
    write_metrics_jsonl(&jsonl, &metrics).map_err(run_err)?;
    write_summary_csv(&csv, &metrics).map_err(run_err)?;
    if let Some(path) = save_model {
        let file = fs::File::create(path)
            .map_err(|e| run_err(format!("cannot create {}: {e}", path.display())))?;
        let mut w = BufWriter::new(file);
        trainer.model().save(&mut w).map_err(run_err)?;
    }

    let last = metrics.last().expect("positive round count");
    println!(
        "{}",
        json!({
            "rounds": metrics.len(),
            "final_train_loss": last.train_loss,
            "final_accuracy": last.eval_accuracy,
            "metrics_path": jsonl,
            "summary_path": csv,
        })
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// partition

pub fn partition(config_path: &Path, out: Option<&Path>) -> Result<(), CliError> {
    let cfg = load_config(config_path)?;
    let seed = cfg.seed().map_err(usage)?;
    let mc = cfg.model().map_err(usage)?;
    let exp = experiment(&cfg, &mc, seed)?;

    let classes = exp.train.classes();
    let class_counts: Vec<Vec<usize>> = exp
        .shards
        .iter()
        .map(|shard| {
            let mut counts = vec![0usize; classes];
            for &ix in shard {
                counts[exp.train.labels()[ix]] += 1;
            }
            counts
        })
        .collect();
    let doc = json!({
        "clients": exp.clients,
        "alpha": exp.alpha,
        "total": exp.train.len(),
        "sizes": exp.shards.iter().map(Vec::len).collect::<Vec<_>>(),
        "class_counts": class_counts,
        "shards": exp.shards,
    });
    emit(out, &doc)
}

// ---------------------------------------------------------------------------
// analyze

pub fn analyze(
    config_path: Option<&Path>,
    model_path: Option<&Path>,
    q: Option<u32>,
    d: Option<usize>,
) -> Result<(), CliError> {
    // Bare formula mode: both --q and --d, no config needed.
    if q.is_some() || d.is_some() {
        let (Some(q), Some(d)) = (q, d) else {
            return Err(usage("--q and --d must be given together"));
        };
        let value = delta(q, d).map_err(usage)?;
        println!("{}", json!({ "q": q, "d": d, "delta": value }));
        return Ok(());
    }
    let Some(config_path) = config_path else {
        return Err(usage("--config is required unless --q/--d are given"));
    };
    let cfg = load_config(config_path)?;
    let seed = cfg.seed().map_err(usage)?;
    let model = match model_path {
        Some(path) => {
            let file = fs::File::open(path)
                .map_err(|e| usage(format!("cannot read {}: {e}", path.display())))?;
            SplitModel::load(&mut BufReader::new(file)).map_err(run_err)?
        }
        None => {
            let mc = cfg.model().map_err(usage)?;
            let mut irng = Rng::derive(seed, &[STREAM_INIT]);
            init_model(&mc, &mut irng).map_err(run_err)?
        }
    };
    let mc = model.cfg.clone();
    let tc = cfg.train().map_err(usage)?;
    let exp = experiment(&cfg, &mc, seed)?;
    let consts = penalty_constants(&cfg, &model, &tc, &exp)?;
    let entries = tc.compression.kept + 2;
    let n = consts.batch * entries * mc.embed_dim;
    let q = tc.compression.bit_width.bits();
    let dv = delta(q, n).map_err(run_err)?;
    let r = tsfl_core::analysis::r_term(&consts, tc.compression.kept, q).map_err(run_err)?;
    println!(
        "{}",
        json!({
            "kept": tc.compression.kept,
            "q": q,
            "quantizer_entries": n,
            "delta": dv,
            "psi": consts.psi,
            "lambda": consts.lambda,
            "r_value": r,
        })
    );
    Ok(())
}

/// Assemble the penalty constants for the configured experiment: aggregation
/// weights from the shard sizes, probe-measured token/energy bounds unless
/// the config pins them.
fn penalty_constants(
    cfg: &Config,
    model: &SplitModel,
    tc: &tsfl_core::sim::TrainConfig,
    exp: &Experiment,
) -> Result<BoundConstants, CliError> {
    let v = exp.clients;
    let total: usize = exp.shards.iter().map(Vec::len).sum();
    let rhos: Vec<f64> = exp
        .shards
        .iter()
        .map(|s| s.len() as f64 / total as f64)
        .collect();
    let default_upsilon = tc.clients_per_round as f64 / v as f64;
    let upsilons = cfg.per_client("upsilon", v, default_upsilon).map_err(usage)?;
    let sigma_sqs = cfg.per_client("sigma_sq", v, 1.0).map_err(usage)?;

    let psi_key: Option<f64> = cfg.get_opt("psi").map_err(usage)?;
    let lambda_key: Option<f64> = cfg.get_opt("lambda").map_err(usage)?;
    let (psi, lambda) = match (psi_key, lambda_key) {
        (Some(p), Some(l)) => (p, l),
        (p, l) => {
            let (mp, ml) = measure(model, &exp.train, tc)?;
            (p.unwrap_or(mp), l.unwrap_or(ml))
        }
    };

    let consts = BoundConstants {
        clients: v,
        cohort: tc.clients_per_round,
        local_steps: tc.local_steps,
        rounds: tc.rounds as usize,
        eta: tc.eta,
        rhos,
        upsilons,
        sigma_sqs,
        gamma: cfg.get_or("gamma", 1.0).map_err(usage)?,
        kappa: cfg.get_or("kappa", 1.0).map_err(usage)?,
        lambda,
        psi,
        batch: tc.batch,
        tokens: model.cfg.patch_tokens,
        embed_dim: model.cfg.embed_dim,
    };
    consts.validate().map_err(usage)?;
    Ok(consts)
}

/// Probe the token-norm and refined-energy bounds on up to four leading
/// training batches.
fn measure(
    model: &SplitModel,
    train: &Dataset,
    tc: &tsfl_core::sim::TrainConfig,
) -> Result<(f64, f64), CliError> {
    let mut batches = Vec::new();
    let mut start = 0usize;
    while start < train.len() && batches.len() < 4 {
        let end = (start + tc.batch).min(train.len());
        let (features, _) = train.gather(&(start..end).collect::<Vec<_>>());
        batches.push(features);
        start = end;
    }
    measure_constants(model, &batches, &tc.compression).map_err(run_err)
}

// ---------------------------------------------------------------------------
// search

pub fn search(config_path: &Path) -> Result<(), CliError> {
    let cfg = load_config(config_path)?;
    let seed = cfg.seed().map_err(usage)?;
    let mc = cfg.model().map_err(usage)?;
    let tc = cfg.train().map_err(usage)?;
    let space = cfg.space().map_err(usage)?;
    let limits = cfg.limits().map_err(usage)?;
    let exp = experiment(&cfg, &mc, seed)?;
    let mut irng = Rng::derive(seed, &[STREAM_INIT]);
    let model = init_model(&mc, &mut irng).map_err(run_err)?;
    let consts = penalty_constants(&cfg, &model, &tc, &exp)?;

    match grid_search(&mc, &consts, &space, &limits) {
        Ok(choice) => {
            println!(
                "{}",
                json!({
                    "feasible": true,
                    "cut": choice.cut,
                    "kept": choice.kept,
                    "q": choice.width.bits(),
                    "r_value": choice.r_value,
                    "payload_bits": choice.payload_bits,
                    "memory_bytes": choice.memory_bytes,
                })
            );
            Ok(())
        }
        Err(AnalysisError::MemoryBound {
            omega_bytes,
            tightest_bytes,
        }) => {
            println!(
                "{}",
                json!({
                    "feasible": false,
                    "binding": "memory",
                    "cap_bytes": omega_bytes,
                    "tightest_bytes": tightest_bytes,
                })
            );
            Ok(())
        }
        Err(AnalysisError::PayloadBound {
            cap_bits,
            tightest_bits,
        }) => {
            println!(
                "{}",
                json!({
                    "feasible": false,
                    "binding": "payload",
                    "cap_bits": cap_bits,
                    "tightest_bits": tightest_bits,
                })
            );
            Ok(())
        }
        Err(e) => Err(usage(e)),
    }
}

// ---------------------------------------------------------------------------
// codec

/// JSON image of a wire message. Payload bytes ride as hex; float payloads
/// are exact because every stored value is f32-representable and the JSON
/// writer emits shortest round-tripping decimals.
#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum PacketJson {
    Activations {
        round: u32,
        client: u16,
        m: usize,
        merged_present: bool,
        q: u32,
        b: usize,
        k: usize,
        d: usize,
        a_min: f32,
        a_max: f32,
        indices: Vec<u16>,
        signs_hex: String,
        codes_hex: String,
        #[serde(skip_serializing_if = "Option::is_none")]
        dequantized: Option<Vec<f64>>,
    },
    Gradient {
        round: u32,
        client: u16,
        m: usize,
        merged_present: bool,
        b: usize,
        k: usize,
        d: usize,
        values: Vec<f64>,
    },
    Adapters {
        round: u32,
        client: u16,
        rank: usize,
        d: usize,
        blocks: Vec<AdapterJson>,
    },
}

#[derive(Serialize, Deserialize)]
struct AdapterJson {
    u: Vec<f64>,
    v: Vec<f64>,
}

/// Try the three message kinds in a fixed order. The header layout is
/// shared, so kind is recovered structurally: activation sections, then the
/// full-precision gradient layout, then the adapter layout.
fn decode_any(bytes: &[u8]) -> Result<PacketJson, CliError> {
    if let Ok(p) = decode_activations(bytes) {
        return Ok(PacketJson::Activations {
            round: p.meta.round,
            client: p.meta.client,
            m: p.m,
            merged_present: p.merged_present,
            q: p.qa.bit_width.bits(),
            b: p.qa.b,
            k: p.qa.k,
            d: p.qa.d,
            a_min: p.qa.a_min,
            a_max: p.qa.a_max,
            indices: p.indices,
            signs_hex: to_hex(&p.qa.signs),
            codes_hex: to_hex(&p.qa.codes),
            dequantized: None,
        });
    }
    if let Ok(p) = decode_gradient(bytes) {
        return Ok(PacketJson::Gradient {
            round: p.meta.round,
            client: p.meta.client,
            m: p.m,
            merged_present: p.merged_present,
            b: p.values.shape()[0],
            k: p.values.shape()[1] - 2,
            d: p.values.shape()[2],
            values: p.values.data().to_vec(),
        });
    }
    match decode_adapters(bytes) {
        Ok((adapters, meta)) => Ok(PacketJson::Adapters {
            round: meta.round,
            client: meta.client,
            rank: adapters[0].u.shape()[1],
            d: adapters[0].u.shape()[0],
            blocks: adapters
                .iter()
                .map(|a| AdapterJson {
                    u: a.u.data().to_vec(),
                    v: a.v.data().to_vec(),
                })
                .collect(),
        }),
        Err(e) => Err(run_err(format!("not a recognizable message: {e}"))),
    }
}

fn encode_packet(p: &PacketJson) -> Result<Vec<u8>, CliError> {
    match p {
        PacketJson::Activations {
            round,
            client,
            m,
            merged_present,
            q,
            b,
            k,
            d,
            a_min,
            a_max,
            indices,
            signs_hex,
            codes_hex,
            dequantized: _,
        } => {
            let qa = QuantizedActivations {
                codes: from_hex("codes_hex", codes_hex)?,
                signs: from_hex("signs_hex", signs_hex)?,
                a_min: *a_min,
                a_max: *a_max,
                bit_width: config::bit_width("q", *q).map_err(usage)?,
                b: *b,
                k: *k,
                d: *d,
            };
            let meta = WireMeta {
                round: *round,
                client: *client,
            };
            encode_activations(&qa, indices, *m, *merged_present, meta).map_err(run_err)
        }
        PacketJson::Gradient {
            round,
            client,
            m,
            merged_present,
            b,
            k,
            d,
            values,
        } => {
            let grad = Tensor::new(&[*b, k + 2, *d], values.clone())
                .map_err(|e| run_err(format!("gradient values: {e}")))?;
            let meta = WireMeta {
                round: *round,
                client: *client,
            };
            encode_gradient(&grad, *m, *merged_present, meta).map_err(run_err)
        }
        PacketJson::Adapters {
            round,
            client,
            rank,
            d,
            blocks,
        } => {
            let adapters: Vec<LoraAdapter> = blocks
                .iter()
                .map(|a| {
                    Ok(LoraAdapter {
                        u: Tensor::new(&[*d, *rank], a.u.clone())
                            .map_err(|e| run_err(format!("adapter u: {e}")))?,
                        v: Tensor::new(&[*rank, *d], a.v.clone())
                            .map_err(|e| run_err(format!("adapter v: {e}")))?,
                    })
                })
                .collect::<Result<_, CliError>>()?;
            let meta = WireMeta {
                round: *round,
                client: *client,
            };
            encode_adapters(&adapters, meta).map_err(run_err)
        }
    }
}

pub fn codec_inspect(file: &Path) -> Result<(), CliError> {
    let bytes = read_bytes(file)?;
    let doc = match decode_any(&bytes)? {
        PacketJson::Activations {
            round,
            client,
            m,
            merged_present,
            q,
            b,
            k,
            d,
            ..
        } => json!({
            "kind": "activations",
            "bytes": bytes.len(),
            "round": round,
            "client": client,
            "b": b,
            "k": k,
            "d": d,
            "m": m,
            "q": q,
            "merged_present": merged_present,
            "payload_bits": payload_bits(b, k, d, q),
            "metadata_bits": metadata_bits(b, k, d),
            "compression_ratio": compression_ratio(k, q, m),
        }),
        PacketJson::Gradient {
            round,
            client,
            m,
            merged_present,
            b,
            k,
            d,
            ..
        } => json!({
            "kind": "gradient",
            "bytes": bytes.len(),
            "round": round,
            "client": client,
            "b": b,
            "k": k,
            "d": d,
            "m": m,
            "merged_present": merged_present,
        }),
        PacketJson::Adapters {
            round,
            client,
            rank,
            d,
            blocks,
        } => json!({
            "kind": "adapters",
            "bytes": bytes.len(),
            "round": round,
            "client": client,
            "blocks": blocks.len(),
            "rank": rank,
            "d": d,
        }),
    };
    println!("{doc}");
    Ok(())
}

pub fn codec_decode(file: &Path, out: Option<&Path>, values: bool) -> Result<(), CliError> {
    let bytes = read_bytes(file)?;
    let mut packet = decode_any(&bytes)?;
    if values {
        if let PacketJson::Activations {
            dequantized,
            codes_hex,
            signs_hex,
            a_min,
            a_max,
            q,
            b,
            k,
            d,
            ..
        } = &mut packet
        {
            let qa = QuantizedActivations {
                codes: from_hex("codes_hex", codes_hex)?,
                signs: from_hex("signs_hex", signs_hex)?,
                a_min: *a_min,
                a_max: *a_max,
                bit_width: config::bit_width("q", *q).map_err(usage)?,
                b: *b,
                k: *k,
                d: *d,
            };
            let tensor = dequantize(&qa).map_err(run_err)?;
            *dequantized = Some(tensor.data().to_vec());
        }
    }
    let doc = serde_json::to_value(&packet).expect("packet serializes");
    emit(out, &doc)
}

pub fn codec_encode(file: &Path, out: &Path) -> Result<(), CliError> {
    let text = fs::read_to_string(file)
        .map_err(|e| usage(format!("cannot read {}: {e}", file.display())))?;
    let packet: PacketJson =
        serde_json::from_str(&text).map_err(|e| usage(format!("bad packet JSON: {e}")))?;
    let bytes = encode_packet(&packet)?;
    fs::write(out, &bytes).map_err(|e| run_err(format!("cannot write {}: {e}", out.display())))?;
    println!(
        "{}",
        json!({ "written": out, "bytes": bytes.len() })
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// goldens

/// Regenerate the canonical wire vectors. Without `--write` this is a dry
/// run that compares against whatever the directory holds and fails if
/// anything differs.
pub fn goldens(out_dir: &Path, write: bool) -> Result<(), CliError> {
    if write {
        fs::create_dir_all(out_dir)
            .map_err(|e| run_err(format!("cannot create {}: {e}", out_dir.display())))?;
    }
    let mut stale = 0usize;
    let mut rows = Vec::new();
    for (name, bytes) in golden_vectors() {
        let path = out_dir.join(name);
        let status = if write {
            fs::write(&path, &bytes)
                .map_err(|e| run_err(format!("cannot write {}: {e}", path.display())))?;
            "written"
        } else {
            match fs::read(&path) {
                Ok(existing) if existing == bytes => "matches",
                Ok(_) => {
                    stale += 1;
                    "differs"
                }
                Err(_) => {
                    stale += 1;
                    "missing"
                }
            }
        };
        rows.push(json!({ "name": name, "bytes": bytes.len(), "status": status }));
    }
    println!("{}", json!({ "dir": out_dir, "files": rows }));
    if stale > 0 {
        return Err(run_err(format!(
            "{stale} golden file(s) out of date in {} (rerun with --write)",
            out_dir.display()
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// shared plumbing

fn read_bytes(file: &Path) -> Result<Vec<u8>, CliError> {
    fs::read(file).map_err(|e| usage(format!("cannot read {}: {e}", file.display())))
}

/// Print to stdout or write to a file, always a single JSON line.
fn emit(out: Option<&Path>, doc: &serde_json::Value) -> Result<(), CliError> {
    match out {
        Some(path) => {
            fs::write(path, format!("{doc}\n"))
                .map_err(|e| run_err(format!("cannot write {}: {e}", path.display())))?;
            println!("{}", json!({ "written": path }));
        }
        None => println!("{doc}"),
    }
    Ok(())
}

fn to_hex(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

fn from_hex(field: &str, s: &str) -> Result<Vec<u8>, CliError> {
    if !s.len().is_multiple_of(2) {
        return Err(usage(format!("field `{field}`: odd-length hex string")));
    }
    (0..s.len())
        .step_by(2)
        .map(|i| {
            u8::from_str_radix(&s[i..i + 2], 16)
                .map_err(|_| usage(format!("field `{field}`: bad hex at offset {i}")))
        })
        .collect()
}
