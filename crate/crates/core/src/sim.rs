//! Federated split-training simulation.
//!
//! A round runs the participating clients in a fixed shuffled order. Each
//! client performs `local_steps` SGD steps: the device half runs forward,
//! the boundary activations are refined + quantized + serialized, the
//! server half consumes the decoded message, both halves compute gradients
//! against the same parameter snapshot, and then device adapters (client
//! local) and server adapters + head (shared, evolving sequentially across
//! clients within the round) are updated. After the last client the device
//! adapters are aggregated by shard-size-weighted averaging and written
//! back as the next round's shared starting point.
//!
//! Activation messages carry the actual training values (the decoded bytes
//! are what the server trains on). Gradient and adapter messages are
//! serialized for byte accounting only; the training math keeps the
//! in-process f64 values.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::compress::{
    cls_scores, dequantize, quantize, refine, CompressError, CompressionConfig,
};
use crate::data::{DataError, Dataset};
use crate::model::{
    device_backward, device_forward, loss_and_dlogits, server_backward, server_forward,
    LoraAdapter, ModelConfig, ModelError, SplitModel,
};
use crate::rng::{Rng, STREAM_BATCH, STREAM_ORDER, STREAM_QUANT};
use crate::tensor::Tensor;
use crate::wire::{
    decode_activations, encode_activations, encode_adapters, encode_gradient, WireError, WireMeta,
};

/// Errors surfaced by the simulation layer.
#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Compress(#[from] CompressError),
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Config(String),
}

// ---------------------------------------------------------------------------
// Device heterogeneity and cost models

/// Relative capability of a device class: fraction of the baseline compute
/// rate and of the baseline link bandwidth it actually achieves.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeviceProfile {
    pub compute_fraction: f64,
    pub bandwidth_fraction: f64,
}

/// The three device classes, assigned by client id: within each group of
/// ten ids, 0-2 are weak, 3-6 mid, 7-9 strong; the pattern repeats.
pub const PROFILE_TABLE: [DeviceProfile; 3] = [
    DeviceProfile {
        compute_fraction: 0.05,
        bandwidth_fraction: 0.08,
    },
    DeviceProfile {
        compute_fraction: 0.10,
        bandwidth_fraction: 0.10,
    },
    DeviceProfile {
        compute_fraction: 0.15,
        bandwidth_fraction: 0.12,
    },
];

/// Profile for a client id (cycled in groups of ten).
pub fn profile_for(client: usize) -> DeviceProfile {
    match client % 10 {
        0..=2 => PROFILE_TABLE[0],
        3..=6 => PROFILE_TABLE[1],
        _ => PROFILE_TABLE[2],
    }
}

/// Baseline hardware rates the profiles scale against.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    /// Baseline device compute rate, FLOP/s.
    pub base_device_flops: f64,
    /// Server compute rate, FLOP/s (not profile-scaled).
    pub server_flops: f64,
    /// Baseline link bandwidth, Mbit/s.
    pub bandwidth_mbps: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            base_device_flops: 1e11,
            server_flops: 1e13,
            bandwidth_mbps: 100.0,
        }
    }
}

impl CostModel {
    pub fn validate(&self) -> Result<(), SimError> {
        for (name, v) in [
            ("base_device_flops", self.base_device_flops),
            ("server_flops", self.server_flops),
            ("bandwidth_mbps", self.bandwidth_mbps),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(SimError::Config(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

/// Approximate FLOPs of one transformer block forward at sequence length
/// `l`: 8lD^2 for the four attention projections, 4l^2 D for score and mix
/// matmuls, 16lD^2 for the MLP, 2rD^2 to materialize the adapter delta.
/// Each matmul [a x b][b x c] is counted as 2abc.
pub fn block_flops(l: usize, d: usize, r: usize) -> f64 {
    let (l, d, r) = (l as f64, d as f64, r as f64);
    24.0 * l * d * d + 4.0 * l * l * d + 2.0 * r * d * d
}

/// Device-side FLOPs for one training step of a batch: patch embedding plus
/// the device blocks, forward counted once and backward as twice forward.
pub fn device_step_flops(cfg: &ModelConfig, batch: usize) -> f64 {
    let fwd = batch as f64
        * (2.0 * (cfg.patch_tokens * cfg.patch_dim * cfg.embed_dim) as f64
            + cfg.cut as f64 * block_flops(cfg.patch_tokens + 1, cfg.embed_dim, cfg.rank));
    3.0 * fwd
}

/// Server-side FLOPs for one training step on a length-`l` sequence.
pub fn server_step_flops(cfg: &ModelConfig, batch: usize, l: usize) -> f64 {
    let fwd = batch as f64
        * ((cfg.blocks - cfg.cut) as f64 * block_flops(l, cfg.embed_dim, cfg.rank)
            + 2.0 * (cfg.embed_dim * cfg.classes) as f64);
    3.0 * fwd
}

/// Modeled wall-clock seconds for one client's round participation:
/// device compute at the profile-scaled rate, server compute at the server
/// rate, and both traffic directions over the profile-scaled link.
pub fn execution_time(
    device_flops: f64,
    server_flops: f64,
    bytes_up: u64,
    bytes_down: u64,
    profile: DeviceProfile,
    cost: &CostModel,
) -> f64 {
    device_flops / (cost.base_device_flops * profile.compute_fraction)
        + server_flops / cost.server_flops
        + 8.0 * (bytes_up + bytes_down) as f64
            / (cost.bandwidth_mbps * 1e6 * profile.bandwidth_fraction)
}

// ---------------------------------------------------------------------------
// Device memory model

/// Parameters resident on the device when the model is cut after block `e`:
/// the embedder (projection, CLS, positions), blocks 1..=e, and their
/// adapters.
pub fn device_param_count(cfg: &ModelConfig, e: usize) -> u64 {
    let (d, m, p, r) = (
        cfg.embed_dim as u64,
        cfg.patch_tokens as u64,
        cfg.patch_dim as u64,
        cfg.rank as u64,
    );
    let embedder = p * d + d + (m + 1) * d;
    let per_block = 4 * d * d + 8 * d * d + 4 * d + 2 * r * d;
    embedder + e as u64 * per_block
}

/// Peak device memory in bytes at cut `e` for batch size `b`: 8 bytes per
/// resident parameter plus 16 bytes per cached activation entry (forward
/// value and gradient) per block.
pub fn device_memory_bytes(cfg: &ModelConfig, e: usize, batch: usize) -> u64 {
    8 * device_param_count(cfg, e)
        + 16 * batch as u64 * (cfg.patch_tokens as u64 + 1) * cfg.embed_dim as u64 * e as u64
}

/// All cut positions whose device memory fits the budget.
pub fn feasible_cuts(cfg: &ModelConfig, batch: usize, omega_bytes: u64) -> Vec<usize> {
    (1..cfg.blocks)
        .filter(|&e| device_memory_bytes(cfg, e, batch) <= omega_bytes)
        .collect()
}

// ---------------------------------------------------------------------------
// Aggregation

/// Weighted average of per-client adapter stacks; weights are normalized
/// internally, so raw shard sizes can be passed directly.
pub fn fedavg(entries: &[(Vec<LoraAdapter>, f64)]) -> Result<Vec<LoraAdapter>, SimError> {
    let Some(first) = entries.first() else {
        return Err(SimError::Config("fedavg of zero clients".into()));
    };
    let nblk = first.0.len();
    let total: f64 = entries.iter().map(|(_, w)| w).sum();
    if !entries.iter().all(|(_, w)| w.is_finite() && *w > 0.0) || total <= 0.0 {
        return Err(SimError::Config(format!(
            "fedavg weights must be positive and finite: {:?}",
            entries.iter().map(|(_, w)| *w).collect::<Vec<_>>()
        )));
    }
    let (d, r) = (first.0[0].u.shape()[0], first.0[0].u.shape()[1]);
    let mut out: Vec<LoraAdapter> = (0..nblk).map(|_| LoraAdapter::zeros(d, r)).collect();
    for (adapters, w) in entries {
        if adapters.len() != nblk {
            return Err(SimError::Config(format!(
                "fedavg stacks disagree: {} blocks vs {nblk}",
                adapters.len()
            )));
        }
        let rho = w / total;
        for (acc, a) in out.iter_mut().zip(adapters) {
            acc.u.add_scaled(&a.u, rho).map_err(ModelError::Shape)?;
            acc.v.add_scaled(&a.v, rho).map_err(ModelError::Shape)?;
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// State digest

fn fnv1a(h: &mut u64, bytes: &[u8]) {
    for &b in bytes {
        *h ^= b as u64;
        *h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
}

/// FNV-1a digest of every trainable parameter (device adapters, server
/// adapters, head) as little-endian f64 bytes. Two runs that agree on all
/// trainables agree on the digest.
pub fn state_checksum(model: &SplitModel) -> u64 {
    let mut h = 0xCBF2_9CE4_8422_2325u64;
    let mut eat = |t: &Tensor| {
        for &v in t.data() {
            fnv1a(&mut h, &v.to_le_bytes());
        }
    };
    for a in model.device_adapters() {
        eat(&a.u);
        eat(&a.v);
    }
    for a in model.server_adapters() {
        eat(&a.u);
        eat(&a.v);
    }
    eat(model.head());
    h
}

// ---------------------------------------------------------------------------
// Training configuration and metrics

/// Per-run training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub rounds: u32,
    /// Local SGD steps per client per round.
    pub local_steps: usize,
    pub batch: usize,
    pub eta: f64,
    pub clients_per_round: usize,
    pub compression: CompressionConfig,
}

/// One row of the per-round metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: u32,
    /// Mean training loss over every (client, step) of the round.
    pub train_loss: f64,
    /// Top-1 accuracy on the held-out set, when one was provided.
    pub eval_accuracy: Option<f64>,
    pub eval_loss: Option<f64>,
    pub uplink_bytes: u64,
    pub downlink_bytes: u64,
    /// Modeled wall-clock for the round under the cost model.
    pub sim_seconds: f64,
    /// Hex digest of all trainables at round end; equal digests mean
    /// bit-identical trainable state.
    pub checksum: String,
}

/// Write metrics as JSON Lines, one round per line.
pub fn write_metrics_jsonl(path: &Path, metrics: &[RoundMetrics]) -> Result<(), SimError> {
    let mut out = String::new();
    for m in metrics {
        out.push_str(&serde_json::to_string(m).expect("metrics serialize"));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Write a summary CSV with one row per round.
pub fn write_summary_csv(path: &Path, metrics: &[RoundMetrics]) -> Result<(), SimError> {
    let mut out = String::from(
        "round,train_loss,eval_accuracy,eval_loss,uplink_bytes,downlink_bytes,sim_seconds,checksum\n",
    );
    for m in metrics {
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            m.round,
            m.train_loss,
            opt(m.eval_accuracy),
            opt(m.eval_loss),
            m.uplink_bytes,
            m.downlink_bytes,
            m.sim_seconds,
            m.checksum
        )
        .expect("string write");
    }
    fs::write(path, out)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Evaluation

/// Top-1 accuracy and mean loss over a dataset, running the uncompressed
/// split forward in chunks of `chunk` samples. Ties in the argmax go to the
/// lower class index.
pub fn evaluate(model: &SplitModel, ds: &Dataset, chunk: usize) -> Result<(f64, f64), SimError> {
    if chunk == 0 {
        return Err(SimError::Config("evaluation chunk must be positive".into()));
    }
    let mut correct = 0usize;
    let mut loss_sum = 0.0;
    let indices: Vec<usize> = (0..ds.len()).collect();
    for ch in indices.chunks(chunk) {
        let (x, labels) = ds.gather(ch);
        let dev = device_forward(model, &x)?;
        let (logits, _) = server_forward(model, &dev.activations)?;
        let (loss, _) = loss_and_dlogits(&logits, &labels)?;
        loss_sum += loss * ch.len() as f64;
        let c = logits.shape()[1];
        for (row, &label) in labels.iter().enumerate() {
            let mut best = 0usize;
            for j in 1..c {
                if logits.at(&[row, j]) > logits.at(&[row, best]) {
                    best = j;
                }
            }
            if best == label {
                correct += 1;
            }
        }
    }
    Ok((
        correct as f64 / ds.len() as f64,
        loss_sum / ds.len() as f64,
    ))
}

// ---------------------------------------------------------------------------
// The trainer

/// Orchestrates a full training run over partitioned clients.
pub struct Trainer<'a> {
    model: SplitModel,
    train: &'a Dataset,
    eval: Option<&'a Dataset>,
    shards: Vec<Vec<usize>>,
    cfg: TrainConfig,
    cost: CostModel,
    seed: u64,
}

struct ClientOutcome {
    adapters: Vec<LoraAdapter>,
    weight: f64,
    loss_sum: f64,
    up_bytes: u64,
    down_bytes: u64,
    seconds: f64,
}

impl<'a> Trainer<'a> {
    pub fn new(
        model: SplitModel,
        train: &'a Dataset,
        eval: Option<&'a Dataset>,
        shards: Vec<Vec<usize>>,
        cfg: TrainConfig,
        cost: CostModel,
        seed: u64,
    ) -> Result<Self, SimError> {
        cost.validate()?;
        let mc = &model.cfg;
        if train.width() != mc.input_width() {
            return Err(SimError::Config(format!(
                "dataset width {} does not match model input {} (= patch_tokens x patch_dim)",
                train.width(),
                mc.input_width()
            )));
        }
        for ds in std::iter::once(train).chain(eval) {
            if ds.classes() > mc.classes {
                return Err(SimError::Config(format!(
                    "dataset has {} classes, model head covers {}",
                    ds.classes(),
                    mc.classes
                )));
            }
            if ds.width() != train.width() {
                return Err(SimError::Config("train/eval width mismatch".into()));
            }
        }
        if cfg.rounds == 0 || cfg.local_steps == 0 || cfg.batch == 0 {
            return Err(SimError::Config(
                "rounds, local_steps and batch must all be positive".into(),
            ));
        }
        if !(cfg.eta.is_finite() && cfg.eta > 0.0) {
            return Err(SimError::Config(format!("eta must be positive, got {}", cfg.eta)));
        }
        if shards.is_empty() || cfg.clients_per_round == 0 || cfg.clients_per_round > shards.len()
        {
            return Err(SimError::Config(format!(
                "clients_per_round {} incompatible with {} shards",
                cfg.clients_per_round,
                shards.len()
            )));
        }
        for (i, s) in shards.iter().enumerate() {
            if s.is_empty() {
                return Err(SimError::Config(format!("client {i} has an empty shard")));
            }
            if let Some(&bad) = s.iter().find(|&&ix| ix >= train.len()) {
                return Err(SimError::Config(format!(
                    "client {i} shard references sample {bad} of {}",
                    train.len()
                )));
            }
        }
        cfg.compression.validate(mc.patch_tokens)?;
        Ok(Self {
            model,
            train,
            eval,
            shards,
            cfg,
            cost,
            seed,
        })
    }

    pub fn model(&self) -> &SplitModel {
        &self.model
    }

    pub fn into_model(self) -> SplitModel {
        self.model
    }

    /// Run every round and return the per-round metrics.
    pub fn run(&mut self) -> Result<Vec<RoundMetrics>, SimError> {
        (0..self.cfg.rounds).map(|r| self.run_round(r)).collect()
    }

    /// Participating clients for a round: a seeded shuffle of all client
    /// ids, truncated to the configured cohort size.
    fn cohort(&self, round: u32) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.shards.len()).collect();
        let mut rng = Rng::derive(self.seed, &[STREAM_ORDER, round as u64]);
        rng.shuffle(&mut order);
        order.truncate(self.cfg.clients_per_round);
        order
    }

    /// Execute one round: sequential clients, then device-adapter
    /// aggregation and redistribution accounting.
    pub fn run_round(&mut self, round: u32) -> Result<RoundMetrics, SimError> {
        let cohort = self.cohort(round);
        let global_dev = self.model.device_adapters().to_vec();
        let mut outcomes = Vec::with_capacity(cohort.len());
        for &client in &cohort {
            self.model.set_device_adapters(global_dev.clone())?;
            let outcome = self.run_client(round, client)?;
            outcomes.push(outcome);
        }
        let entries: Vec<(Vec<LoraAdapter>, f64)> = outcomes
            .iter()
            .map(|o| (o.adapters.clone(), o.weight))
            .collect();
        let aggregated = fedavg(&entries)?;
        // Adapter exchange: each client uploads its stack once, and the
        // aggregate goes back out to every cohort member. Counted, not
        // trained on: in-process f64 values stay authoritative.
        let meta = WireMeta {
            round,
            client: u16::MAX,
        };
        let adapter_bytes = encode_adapters(&aggregated, meta)?.len() as u64;
        let mut up: u64 = adapter_bytes * cohort.len() as u64;
        let mut down: u64 = adapter_bytes * cohort.len() as u64;
        let mut seconds = 0.0;
        let mut loss_sum = 0.0;
        for o in &outcomes {
            up += o.up_bytes;
            down += o.down_bytes;
            seconds += o.seconds;
            loss_sum += o.loss_sum;
        }
        self.model.set_device_adapters(aggregated)?;
        let (eval_accuracy, eval_loss) = match self.eval {
            Some(ds) => {
                let (acc, loss) = evaluate(&self.model, ds, 64)?;
                (Some(acc), Some(loss))
            }
            None => (None, None),
        };
        let steps = (cohort.len() * self.cfg.local_steps) as f64;
        Ok(RoundMetrics {
            round,
            train_loss: loss_sum / steps,
            eval_accuracy,
            eval_loss,
            uplink_bytes: up,
            downlink_bytes: down,
            sim_seconds: seconds,
            checksum: format!("{:016x}", state_checksum(&self.model)),
        })
    }

    fn run_client(&mut self, round: u32, client: usize) -> Result<ClientOutcome, SimError> {
        let shard = self.shards[client].clone();
        let mc = self.model.cfg.clone();
        let m = mc.patch_tokens;
        let kept = self.cfg.compression.kept;
        let meta = WireMeta {
            round,
            client: client as u16,
        };
        let mut loss_sum = 0.0;
        let mut up: u64 = 0;
        let mut down: u64 = 0;
        for step in 0..self.cfg.local_steps {
            let mut brng = Rng::derive(
                self.seed,
                &[STREAM_BATCH, round as u64, client as u64, step as u64],
            );
            let picks: Vec<usize> = (0..self.cfg.batch)
                .map(|_| shard[brng.below(shard.len() as u64) as usize])
                .collect();
            let (x, labels) = self.train.gather(&picks);

            // Device forward and the uplink activation message.
            let dev = device_forward(&self.model, &x)?;
            let scores = cls_scores(&dev.cls_patch_logits)?;
            let refined = refine(&dev.activations, &scores, kept)?;
            let mut qrng = Rng::derive(
                self.seed,
                &[STREAM_QUANT, round as u64, client as u64, step as u64],
            );
            let qa = quantize(&refined.tokens, self.cfg.compression.bit_width, &mut qrng)?;
            let msg = encode_activations(&qa, &refined.indices, m, refined.merged_present, meta)?;
            up += msg.len() as u64;

            // The server trains on exactly what came over the wire.
            let packet = decode_activations(&msg)?;
            let decoded = dequantize(&packet.qa)?;
            let server_in = if packet.merged_present {
                decoded
            } else {
                drop_last_token(&decoded)
            };
            let (logits, cache) = server_forward(&self.model, &server_in)?;
            let (loss, dlogits) = loss_and_dlogits(&logits, &labels)?;
            loss_sum += loss;
            let sb = server_backward(&self.model, &cache, &dlogits)?;

            // Downlink gradient: padded to the full refined shape for the
            // wire; the quantizer backward is straight-through identity.
            let dtokens = pad_merged_grad(&sb.dacts, packet.merged_present);
            down += encode_gradient(&dtokens, m, packet.merged_present, meta)?.len() as u64;
            let dacts = crate::compress::grad_scatter(&dtokens, &refined, m)?;
            let dev_grads = device_backward(&self.model, &dev, &dacts)?;

            // Both gradients are taken at the same snapshot; updates land
            // after both backward passes.
            self.model.apply_device_step(&dev_grads, self.cfg.eta)?;
            self.model
                .apply_server_step(&sb.adapter_grads, &sb.head_grad, self.cfg.eta)?;
        }
        let steps = self.cfg.local_steps;
        let dev_flops = steps as f64 * device_step_flops(&mc, self.cfg.batch);
        let srv_len = if kept < m { kept + 2 } else { kept + 1 };
        let srv_flops = steps as f64 * server_step_flops(&mc, self.cfg.batch, srv_len);
        let seconds = execution_time(dev_flops, srv_flops, up, down, profile_for(client), &self.cost);
        Ok(ClientOutcome {
            adapters: self.model.device_adapters().to_vec(),
            weight: shard.len() as f64,
            loss_sum,
            up_bytes: up,
            down_bytes: down,
            seconds,
        })
    }
}

/// [B x L x D] -> [B x (L-1) x D], dropping the trailing token.
fn drop_last_token(t: &Tensor) -> Tensor {
    let (b, l, d) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let mut data = Vec::with_capacity(b * (l - 1) * d);
    for bi in 0..b {
        let start = bi * l * d;
        data.extend_from_slice(&t.data()[start..start + (l - 1) * d]);
    }
    Tensor::new(&[b, l - 1, d], data).expect("trailing token dropped")
}

/// Pad a server gradient back to the refined shape [B x (K+2) x D]. With the
/// merged token present this is the identity; without it a zero gradient
/// column is appended for the empty slot.
fn pad_merged_grad(dacts: &Tensor, merged_present: bool) -> Tensor {
    if merged_present {
        return dacts.clone();
    }
    let (b, l, d) = (dacts.shape()[0], dacts.shape()[1], dacts.shape()[2]);
    let mut out = Tensor::zeros(&[b, l + 1, d]);
    for bi in 0..b {
        for li in 0..l {
            for di in 0..d {
                let val = dacts.at(&[bi, li, di]);
                out.set(&[bi, li, di], val);
            }
        }
    }
    out
}
