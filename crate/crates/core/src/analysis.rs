//! Overhead and convergence analysis: the quantizer distortion constant,
//! empirical measurement of the activation bounds, the compression penalty
//! on the convergence rate, and a constrained configuration search.

use thiserror::Error;

use crate::compress::{cls_scores, refine, BitWidth, CompressError, CompressionConfig};
use crate::model::{device_forward, ModelConfig, ModelError, SplitModel};
use crate::sim::device_memory_bytes;
use crate::tensor::Tensor;
use crate::wire::payload_bits;

/// Errors from the analysis layer, including structured infeasibility
/// reports from the configuration search.
#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("{0}")]
    Invalid(String),
    #[error(
        "no cut fits the device memory budget: {omega_bytes} bytes allowed, \
         the smallest candidate needs {tightest_bytes}"
    )]
    MemoryBound {
        omega_bytes: u64,
        tightest_bytes: u64,
    },
    #[error(
        "no (K, q) fits the payload budget: {cap_bits} bits allowed, \
         the smallest candidate needs {tightest_bits}"
    )]
    PayloadBound { cap_bits: u64, tightest_bits: u64 },
    #[error("the search space is empty")]
    EmptySpace,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Compress(#[from] CompressError),
}

/// Relative second-moment distortion of the stochastic quantizer on a
/// d-entry tensor at q bits: (1 + sqrt(2d - 1)) / (2 (2^q - 1)). The
/// expected squared error is at most delta times the squared norm of the
/// input.
pub fn delta(q: u32, d: usize) -> Result<f64, AnalysisError> {
    if !(1..=32).contains(&q) {
        return Err(AnalysisError::Invalid(format!("bit width {q} outside 1..=32")));
    }
    if d == 0 {
        return Err(AnalysisError::Invalid("delta of an empty tensor".into()));
    }
    let s = (2f64.powi(q as i32)) - 1.0;
    Ok((1.0 + (2.0 * d as f64 - 1.0).sqrt()) / (2.0 * s))
}

/// Everything the penalty formula needs. Per-client vectors are indexed by
/// client id and must all have length `clients`.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundConstants {
    /// Total clients V.
    pub clients: usize,
    /// Cohort size S drawn each round.
    pub cohort: usize,
    /// Local steps I per client per round.
    pub local_steps: usize,
    /// Rounds T.
    pub rounds: usize,
    /// Constant stepsize.
    pub eta: f64,
    /// Aggregation weights rho_n (shard fractions).
    pub rhos: Vec<f64>,
    /// Per-client sampling constants upsilon_n.
    pub upsilons: Vec<f64>,
    /// Per-client gradient variances sigma_n^2.
    pub sigma_sqs: Vec<f64>,
    /// Smoothness scale gamma.
    pub gamma: f64,
    /// Free splitting parameter kappa > 0.
    pub kappa: f64,
    /// Bound on the squared Frobenius norm of the quantizer input.
    pub lambda: f64,
    /// Bound on the squared norm of any boundary patch token.
    pub psi: f64,
    pub batch: usize,
    /// Patch tokens M.
    pub tokens: usize,
    pub embed_dim: usize,
}

impl BoundConstants {
    pub fn validate(&self) -> Result<(), AnalysisError> {
        let bad = |what: &str| Err(AnalysisError::Invalid(what.to_string()));
        if self.clients == 0 || self.cohort == 0 || self.cohort > self.clients {
            return bad("cohort must satisfy 1 <= S <= V");
        }
        if self.local_steps == 0 || self.rounds == 0 || self.batch == 0 {
            return bad("local_steps, rounds and batch must be positive");
        }
        if self.tokens == 0 || self.embed_dim == 0 {
            return bad("tokens and embed_dim must be positive");
        }
        if !(self.eta.is_finite() && self.eta > 0.0) {
            return bad("eta must be positive and finite");
        }
        if !(self.kappa.is_finite() && self.kappa > 0.0) {
            return bad("kappa must be positive and finite");
        }
        for (name, v) in [
            ("gamma", self.gamma),
            ("lambda", self.lambda),
            ("psi", self.psi),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(AnalysisError::Invalid(format!(
                    "{name} must be nonnegative and finite, got {v}"
                )));
            }
        }
        for (name, xs) in [
            ("rhos", &self.rhos),
            ("upsilons", &self.upsilons),
            ("sigma_sqs", &self.sigma_sqs),
        ] {
            if xs.len() != self.clients {
                return Err(AnalysisError::Invalid(format!(
                    "{name} has {} entries for {} clients",
                    xs.len(),
                    self.clients
                )));
            }
            if !xs.iter().all(|v| v.is_finite() && *v >= 0.0) {
                return Err(AnalysisError::Invalid(format!("{name} must be nonnegative")));
            }
        }
        if !self.upsilons.iter().all(|v| *v > 0.0) {
            return bad("upsilons must be strictly positive");
        }
        Ok(())
    }
}

/// Compression penalty added to the convergence rate by running with K kept
/// tokens at q bits:
///
/// ```text
/// R = (8 V S I / T) * (T eta^2)
///     * sum_n ((rho_n^2 + 1) / upsilon_n)
///       * [ 2 sigma_n^2
///         + 2 gamma^2 (1 + kappa) Lambda delta(q, B(K+2)D)
///         + 8 gamma^2 (1 + 1/kappa) Psi B (M - K) ]
/// ```
///
/// The stepsize is constant, so the sum of squared stepsizes over T rounds
/// is written as the product T eta^2.
pub fn r_term(c: &BoundConstants, kept: usize, q: u32) -> Result<f64, AnalysisError> {
    c.validate()?;
    if kept == 0 || kept > c.tokens {
        return Err(AnalysisError::Invalid(format!(
            "kept {kept} outside 1..={}",
            c.tokens
        )));
    }
    let d = c.batch * (kept + 2) * c.embed_dim;
    let del = delta(q, d)?;
    let g2 = c.gamma * c.gamma;
    let quant_term = 2.0 * g2 * (1.0 + c.kappa) * c.lambda * del;
    let drop_term =
        8.0 * g2 * (1.0 + 1.0 / c.kappa) * c.psi * c.batch as f64 * (c.tokens - kept) as f64;
    let mut acc = 0.0;
    for n in 0..c.clients {
        let bracket = 2.0 * c.sigma_sqs[n] + quant_term + drop_term;
        acc += (c.rhos[n] * c.rhos[n] + 1.0) / c.upsilons[n] * bracket;
    }
    let lead = 8.0 * (c.clients * c.cohort * c.local_steps) as f64 / c.rounds as f64;
    let step_sq_sum = c.rounds as f64 * c.eta * c.eta;
    Ok(lead * step_sq_sum * acc)
}

/// Measure the activation bounds (Psi, Lambda) empirically: run the device
/// forward on each probe batch, take Psi as the largest squared patch-token
/// norm at the boundary and Lambda as the largest squared Frobenius norm of
/// the refined sequence actually fed to the quantizer under `cc`.
pub fn measure_constants(
    model: &SplitModel,
    batches: &[Tensor],
    cc: &CompressionConfig,
) -> Result<(f64, f64), AnalysisError> {
    if batches.is_empty() {
        return Err(AnalysisError::Invalid("no probe batches".into()));
    }
    let m = model.cfg.patch_tokens;
    cc.validate(m)?;
    let mut psi: f64 = 0.0;
    let mut lambda: f64 = 0.0;
    for batch in batches {
        let dev = device_forward(model, batch)?;
        let acts = &dev.activations;
        let (bsz, d) = (acts.shape()[0], acts.shape()[2]);
        for b in 0..bsz {
            for i in 1..=m {
                let sq: f64 = (0..d).map(|j| acts.at(&[b, i, j]).powi(2)).sum();
                psi = psi.max(sq);
            }
        }
        let scores = cls_scores(&dev.cls_patch_logits)?;
        let refined = refine(acts, &scores, cc.kept)?;
        lambda = lambda.max(refined.tokens.frob_sq());
    }
    Ok((psi, lambda))
}

/// Candidate grid for the configuration search.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchSpace {
    /// Candidate cut positions e (1 <= e < blocks).
    pub cuts: Vec<usize>,
    /// Candidate kept-token counts K.
    pub kept: Vec<usize>,
    /// Candidate bit widths q.
    pub widths: Vec<BitWidth>,
}

/// Hard resource budgets.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchLimits {
    /// Uplink payload cap per step, bits.
    pub payload_cap_bits: u64,
    /// Device memory cap, bytes.
    pub memory_cap_bytes: u64,
}

/// Winning configuration and its scores.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchChoice {
    pub cut: usize,
    pub kept: usize,
    pub width: BitWidth,
    pub r_value: f64,
    pub payload_bits: u64,
    pub memory_bytes: u64,
}

/// Minimize the penalty over the (cut, K, q) grid subject to the payload
/// and memory budgets. The penalty depends on (K, q) only; the cut enters
/// through the memory constraint. Exact ties are broken lexicographically
/// by (penalty, payload bits, cut, K, q ascending). Infeasibility is
/// reported against the constraint that actually binds, memory first: if no
/// candidate cut fits the memory budget the search is memory-bound
/// regardless of payload, otherwise payload-bound.
pub fn grid_search(
    cfg: &ModelConfig,
    consts: &BoundConstants,
    space: &SearchSpace,
    limits: &SearchLimits,
) -> Result<SearchChoice, AnalysisError> {
    consts.validate()?;
    if space.cuts.is_empty() || space.kept.is_empty() || space.widths.is_empty() {
        return Err(AnalysisError::EmptySpace);
    }
    for &e in &space.cuts {
        if e == 0 || e >= cfg.blocks {
            return Err(AnalysisError::Invalid(format!(
                "cut {e} outside 1..{}",
                cfg.blocks
            )));
        }
    }
    for &k in &space.kept {
        if k == 0 || k > cfg.patch_tokens {
            return Err(AnalysisError::Invalid(format!(
                "kept {k} outside 1..={}",
                cfg.patch_tokens
            )));
        }
    }

    let feasible_cuts: Vec<(usize, u64)> = space
        .cuts
        .iter()
        .map(|&e| (e, device_memory_bytes(cfg, e, consts.batch)))
        .filter(|&(_, mem)| mem <= limits.memory_cap_bytes)
        .collect();
    if feasible_cuts.is_empty() {
        let tightest = space
            .cuts
            .iter()
            .map(|&e| device_memory_bytes(cfg, e, consts.batch))
            .min()
            .expect("nonempty cuts");
        return Err(AnalysisError::MemoryBound {
            omega_bytes: limits.memory_cap_bytes,
            tightest_bytes: tightest,
        });
    }

    let mut best: Option<SearchChoice> = None;
    let mut tightest_payload = u64::MAX;
    for &k in &space.kept {
        for &q in &space.widths {
            let bits = payload_bits(consts.batch, k, cfg.embed_dim, q.bits());
            tightest_payload = tightest_payload.min(bits);
            if bits > limits.payload_cap_bits {
                continue;
            }
            let r = r_term(consts, k, q.bits())?;
            for &(e, mem) in &feasible_cuts {
                let cand = SearchChoice {
                    cut: e,
                    kept: k,
                    width: q,
                    r_value: r,
                    payload_bits: bits,
                    memory_bytes: mem,
                };
                let better = match &best {
                    None => true,
                    Some(b) => {
                        let lhs = (r, bits, e, k, q.bits());
                        let rhs = (b.r_value, b.payload_bits, b.cut, b.kept, b.width.bits());
                        lhs.partial_cmp(&rhs).expect("penalties are finite")
                            == std::cmp::Ordering::Less
                    }
                };
                if better {
                    best = Some(cand);
                }
            }
        }
    }
    best.ok_or(AnalysisError::PayloadBound {
        cap_bits: limits.payload_cap_bits,
        tightest_bits: tightest_payload,
    })
}
