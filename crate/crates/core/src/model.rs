//! Split vision transformer with a frozen backbone and per-block LoRA
//! adapters.
//!
//! The model is cut at block `cut`: a device runs the patch embedder and
//! blocks `1..=cut`, the server runs blocks `cut+1..=blocks` plus the
//! classifier head. Backbone weights are never updated; the only trainable
//! state is one low-rank (U, V) adapter pair per block — applied at a single
//! configurable attention projection — and the head.
//!
//! Blocks are pre-norm: `h = x + Attn(LN1(x)) · Wo`, `out = h + MLP(LN2(h))`,
//! with single-head attention `softmax(Q Kᵀ / sqrt(D)) V` and a tanh-GELU MLP
//! of width `4D`. All backward passes are hand-derived; forward passes cache
//! exactly what backward needs.

use std::io::{Read, Write};

use thiserror::Error;

use crate::ops::{
    cross_entropy, gelu, gelu_backward, layer_norm, layer_norm_backward, matmul, matmul_backward,
    softmax_rows, softmax_rows_backward, transpose2,
};
use crate::rng::Rng;
use crate::tensor::{ShapeError, Tensor};

/// Layer-norm epsilon, fixed for the whole model.
pub const LN_EPS: f64 = 1e-5;
/// Standard deviation of Gaussian parameter init (backbone, embeddings, head,
/// adapter U factors).
pub const INIT_STD: f64 = 0.02;
/// Checkpoint file magic.
pub const CHECKPOINT_MAGIC: [u8; 4] = *b"TSFL";
/// Checkpoint format version.
pub const CHECKPOINT_VERSION: u16 = 1;

/// Errors from model construction, checkpointing, and the forward/backward
/// passes.
#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error("cache is stale: model parameters changed since the forward pass")]
    StaleCache,
    #[error("batch has {got} feature columns, model expects {want}")]
    BatchWidth { got: usize, want: usize },
    #[error("checkpoint: {0}")]
    BadCheckpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Which per-block attention projection carries the low-rank delta.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LoraSite {
    Query,
    Key,
    Value,
    Output,
}

impl LoraSite {
    pub fn as_u8(self) -> u8 {
        match self {
            LoraSite::Query => 0,
            LoraSite::Key => 1,
            LoraSite::Value => 2,
            LoraSite::Output => 3,
        }
    }

    pub fn from_u8(v: u8) -> Result<Self, ModelError> {
        Ok(match v {
            0 => LoraSite::Query,
            1 => LoraSite::Key,
            2 => LoraSite::Value,
            3 => LoraSite::Output,
            _ => return Err(ModelError::BadCheckpoint(format!("lora site byte {v}"))),
        })
    }
}

/// Model hyperparameters. `blocks`/`embed_dim`/`patch_tokens` are E/D/M in the
/// accompanying docs; `cut` is the split layer e with `1 <= e < E`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Total transformer blocks E.
    pub blocks: usize,
    /// Embedding width D.
    pub embed_dim: usize,
    /// Patch tokens per image M (sequence length is M + 1 with CLS).
    pub patch_tokens: usize,
    /// Raw feature size of one patch before projection.
    pub patch_dim: usize,
    /// Attention heads H. Only H = 1 is supported: the CLS-score path is
    /// defined on a single attention row and no head aggregation is defined.
    pub heads: usize,
    /// LoRA rank r.
    pub rank: usize,
    /// Output classes C.
    pub classes: usize,
    /// Cut layer e: device runs blocks 1..=e, server runs the rest.
    pub cut: usize,
    /// Projection that carries the adapter delta.
    pub lora_site: LoraSite,
    /// Scale multiplying U·V before it is added to the frozen weight.
    pub lora_scale: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |m: String| Err(ModelError::Config(m));
        if self.blocks < 2 {
            return fail(format!("blocks = {} (need at least 2 to split)", self.blocks));
        }
        if self.cut == 0 || self.cut >= self.blocks {
            return fail(format!(
                "cut = {} must lie in [1, {}]",
                self.cut,
                self.blocks - 1
            ));
        }
        if self.embed_dim == 0 || self.patch_tokens == 0 || self.patch_dim == 0 {
            return fail("embed_dim, patch_tokens, patch_dim must be positive".into());
        }
        if self.heads != 1 {
            return fail(format!(
                "heads = {} unsupported: CLS scores are defined for a single head",
                self.heads
            ));
        }
        if !self.embed_dim.is_multiple_of(self.heads) {
            return fail(format!(
                "embed_dim {} not divisible by heads {}",
                self.embed_dim, self.heads
            ));
        }
        if self.rank == 0 || self.rank > self.embed_dim {
            return fail(format!(
                "rank = {} must lie in [1, embed_dim = {}]",
                self.rank, self.embed_dim
            ));
        }
        if self.classes < 2 {
            return fail(format!("classes = {} (need at least 2)", self.classes));
        }
        if !self.lora_scale.is_finite() {
            return fail("lora_scale must be finite".into());
        }
        Ok(())
    }

    /// Flat feature width of one input sample: patch_tokens * patch_dim.
    pub fn input_width(&self) -> usize {
        self.patch_tokens * self.patch_dim
    }
}

/// Frozen weights of one transformer block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
    /// MLP up-projection [D x 4D].
    pub w1: Tensor,
    /// MLP down-projection [4D x D].
    pub w2: Tensor,
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
}

impl BlockParams {
    fn init(d: usize, rng: &mut Rng) -> Self {
        let mut gauss = |shape: &[usize]| Tensor::from_fn(shape, || rng.normal() * INIT_STD);
        BlockParams {
            w_q: gauss(&[d, d]),
            w_k: gauss(&[d, d]),
            w_v: gauss(&[d, d]),
            w_o: gauss(&[d, d]),
            w1: gauss(&[d, 4 * d]),
            w2: gauss(&[4 * d, d]),
            ln1_gamma: Tensor::new(&[d], vec![1.0; d]).unwrap(),
            ln1_beta: Tensor::zeros(&[d]),
            ln2_gamma: Tensor::new(&[d], vec![1.0; d]).unwrap(),
            ln2_beta: Tensor::zeros(&[d]),
        }
    }

    fn site(&self, site: LoraSite) -> &Tensor {
        match site {
            LoraSite::Query => &self.w_q,
            LoraSite::Key => &self.w_k,
            LoraSite::Value => &self.w_v,
            LoraSite::Output => &self.w_o,
        }
    }
}

/// One low-rank adapter pair: delta = scale · U · V with U [D x r], V [r x D].
/// U is Gaussian at init and V is zero, so a fresh adapter is an exact no-op.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub u: Tensor,
    pub v: Tensor,
}

impl LoraAdapter {
    pub fn init(d: usize, r: usize, rng: &mut Rng) -> Self {
        LoraAdapter {
            u: Tensor::from_fn(&[d, r], || rng.normal() * INIT_STD),
            v: Tensor::zeros(&[r, d]),
        }
    }

    pub fn zeros(d: usize, r: usize) -> Self {
        LoraAdapter {
            u: Tensor::zeros(&[d, r]),
            v: Tensor::zeros(&[r, d]),
        }
    }

    /// Materialized delta U · V (unscaled).
    pub fn delta(&self) -> Tensor {
        matmul(&self.u, &self.v).expect("adapter factor shapes")
    }
}

/// Gradient pair matching a [`LoraAdapter`].
#[derive(Debug, Clone)]
pub struct AdapterGrads {
    pub du: Tensor,
    pub dv: Tensor,
}

impl AdapterGrads {
    pub fn zeros(d: usize, r: usize) -> Self {
        AdapterGrads {
            du: Tensor::zeros(&[d, r]),
            dv: Tensor::zeros(&[r, d]),
        }
    }
}

/// One SGD step over a list of adapters: w' = w - eta * g, elementwise.
pub fn sgd_step(
    adapters: &[LoraAdapter],
    grads: &[AdapterGrads],
    eta: f64,
) -> Result<Vec<LoraAdapter>, ModelError> {
    if adapters.len() != grads.len() {
        return Err(ModelError::Config(format!(
            "sgd_step: {} adapters vs {} gradients",
            adapters.len(),
            grads.len()
        )));
    }
    let mut out = Vec::with_capacity(adapters.len());
    for (a, g) in adapters.iter().zip(grads) {
        let mut u = a.u.clone();
        u.add_scaled(&g.du, -eta)?;
        let mut v = a.v.clone();
        v.add_scaled(&g.dv, -eta)?;
        out.push(LoraAdapter { u, v });
    }
    Ok(out)
}

/// Patch embedder: projection, CLS embedding, learned positions. Frozen.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedder {
    /// [patch_dim x D] projection.
    pub proj: Tensor,
    /// [D] CLS token embedding.
    pub cls: Tensor,
    /// [(M+1) x D] position embeddings, position 0 = CLS.
    pub pos: Tensor,
}

/// The full split model: frozen backbone plus trainable adapters and head.
/// `version` counts trainable-parameter updates; forward caches are stamped
/// with it so a backward pass against mutated parameters is rejected.
#[derive(Debug, Clone)]
pub struct SplitModel {
    pub cfg: ModelConfig,
    pub embed: Embedder,
    pub blocks: Vec<BlockParams>,
    /// Final layer norm applied to the CLS representation before the head.
    /// Pre-norm blocks leave the residual stream unnormalized, so without
    /// this the classifier would see activations at initialization scale.
    pub final_gamma: Tensor,
    pub final_beta: Tensor,
    device_adapters: Vec<LoraAdapter>,
    server_adapters: Vec<LoraAdapter>,
    head: Tensor,
    version: u64,
}

/// Initialize a model from a config. Draw order is fixed and documented:
/// embedder (proj, cls, pos), then each block's matrices in declaration
/// order, then adapter U factors for blocks 1..E, then the head. Changing
/// this order changes every downstream golden value.
pub fn init_model(cfg: &ModelConfig, rng: &mut Rng) -> Result<SplitModel, ModelError> {
    cfg.validate()?;
    let d = cfg.embed_dim;
    let proj = Tensor::from_fn(&[cfg.patch_dim, d], || rng.normal() * INIT_STD);
    let cls = Tensor::from_fn(&[d], || rng.normal() * INIT_STD);
    let pos = Tensor::from_fn(&[cfg.patch_tokens + 1, d], || rng.normal() * INIT_STD);
    let blocks: Vec<BlockParams> = (0..cfg.blocks).map(|_| BlockParams::init(d, rng)).collect();
    let mut adapters: Vec<LoraAdapter> = (0..cfg.blocks)
        .map(|_| LoraAdapter::init(d, cfg.rank, rng))
        .collect();
    let server_adapters = adapters.split_off(cfg.cut);
    let head = Tensor::from_fn(&[d, cfg.classes], || rng.normal() * INIT_STD);
    // Constant-initialized and frozen: consumes no draws, so the init
    // stream layout above is the complete draw order.
    let final_gamma = Tensor::new(&[d], vec![1.0; d]).expect("gamma shape");
    let final_beta = Tensor::new(&[d], vec![0.0; d]).expect("beta shape");
    Ok(SplitModel {
        cfg: cfg.clone(),
        embed: Embedder { proj, cls, pos },
        blocks,
        final_gamma,
        final_beta,
        device_adapters: adapters,
        server_adapters,
        head,
        version: 1,
    })
}

impl SplitModel {
    pub fn device_adapters(&self) -> &[LoraAdapter] {
        &self.device_adapters
    }

    pub fn server_adapters(&self) -> &[LoraAdapter] {
        &self.server_adapters
    }

    pub fn head(&self) -> &Tensor {
        &self.head
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    fn check_adapters(&self, adapters: &[LoraAdapter], n: usize) -> Result<(), ModelError> {
        let (d, r) = (self.cfg.embed_dim, self.cfg.rank);
        if adapters.len() != n {
            return Err(ModelError::Config(format!(
                "expected {n} adapters, got {}",
                adapters.len()
            )));
        }
        for a in adapters {
            if a.u.shape() != [d, r] || a.v.shape() != [r, d] {
                return Err(ModelError::Config(format!(
                    "adapter shapes {:?}/{:?} do not match [D={d} x r={r}]",
                    a.u.shape(),
                    a.v.shape()
                )));
            }
        }
        Ok(())
    }

    /// Replace device-side adapters (e.g. with a freshly aggregated global
    /// set). Invalidates outstanding forward caches.
    pub fn set_device_adapters(&mut self, adapters: Vec<LoraAdapter>) -> Result<(), ModelError> {
        self.check_adapters(&adapters, self.cfg.cut)?;
        self.device_adapters = adapters;
        self.version += 1;
        Ok(())
    }

    /// Replace server-side adapters and head together.
    pub fn set_server_state(
        &mut self,
        adapters: Vec<LoraAdapter>,
        head: Tensor,
    ) -> Result<(), ModelError> {
        self.check_adapters(&adapters, self.cfg.blocks - self.cfg.cut)?;
        if head.shape() != [self.cfg.embed_dim, self.cfg.classes] {
            return Err(ModelError::Config(format!(
                "head shape {:?} does not match [D x C]",
                head.shape()
            )));
        }
        self.server_adapters = adapters;
        self.head = head;
        self.version += 1;
        Ok(())
    }

    /// SGD step on the device adapters.
    pub fn apply_device_step(&mut self, grads: &[AdapterGrads], eta: f64) -> Result<(), ModelError> {
        let next = sgd_step(&self.device_adapters, grads, eta)?;
        self.device_adapters = next;
        self.version += 1;
        Ok(())
    }

    /// SGD step on the server adapters and the head.
    pub fn apply_server_step(
        &mut self,
        grads: &[AdapterGrads],
        head_grad: &Tensor,
        eta: f64,
    ) -> Result<(), ModelError> {
        let next = sgd_step(&self.server_adapters, grads, eta)?;
        let mut head = self.head.clone();
        head.add_scaled(head_grad, -eta)?;
        self.server_adapters = next;
        self.head = head;
        self.version += 1;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Forward / backward

/// Cached intermediates of one block's forward pass.
#[derive(Debug, Clone)]
struct BlockCache {
    /// Block input [B x L x D].
    x: Tensor,
    /// LN1 output.
    x1: Tensor,
    q: Tensor,
    k: Tensor,
    v: Tensor,
    /// Attention probabilities [B x L x L].
    probs: Tensor,
    /// probs · V, before the output projection.
    att_out: Tensor,
    /// After the first residual.
    h: Tensor,
    /// LN2 output.
    x2: Tensor,
    /// MLP pre-activation [B x L x 4D].
    z1: Tensor,
    /// GELU output.
    g: Tensor,
}

/// Device-side forward result: boundary activations, the CLS attention
/// logits that drive token selection, and the cache for the backward pass.
#[derive(Debug, Clone)]
pub struct DeviceForwardOutput {
    /// Boundary activations [B x (M+1) x D]; token 0 is CLS.
    pub activations: Tensor,
    /// Pre-softmax CLS-row attention logits q0·ki / sqrt(D) from the last
    /// device block, patch tokens only: [B x M].
    pub cls_patch_logits: Tensor,
    cache: LayerStackCache,
}

/// Server-side forward cache.
#[derive(Debug, Clone)]
pub struct ServerForwardCache {
    cache: LayerStackCache,
    /// Final block output [B x L x D].
    final_acts: Tensor,
    /// CLS rows after the final layer norm [B x D].
    normed_cls: Tensor,
}

#[derive(Debug, Clone)]
struct LayerStackCache {
    blocks: Vec<BlockCache>,
    version: u64,
}

/// Server backward result.
#[derive(Debug, Clone)]
pub struct ServerBackward {
    /// One gradient pair per server block.
    pub adapter_grads: Vec<AdapterGrads>,
    /// Gradient of the classifier head [D x C].
    pub head_grad: Tensor,
    /// Gradient w.r.t. the server input activations [B x L x D].
    pub dacts: Tensor,
}

fn sample2d(t: &Tensor, b: usize) -> Tensor {
    let (l, d) = (t.shape()[1], t.shape()[2]);
    let start = b * l * d;
    Tensor::new(&[l, d], t.data()[start..start + l * d].to_vec()).unwrap()
}

fn set_sample2d(t: &mut Tensor, b: usize, m: &Tensor) {
    let (l, d) = (t.shape()[1], t.shape()[2]);
    let start = b * l * d;
    t.data_mut()[start..start + l * d].copy_from_slice(m.data());
}

/// Effective weight at the adapted site: W + scale · U · V. Materialized per
/// call; at desk scale this costs less than the bookkeeping to avoid it.
fn effective_weight(w: &Tensor, adapter: &LoraAdapter, scale: f64) -> Tensor {
    let mut w_eff = w.clone();
    w_eff
        .add_scaled(&adapter.delta(), scale)
        .expect("delta shape matches site weight");
    w_eff
}

struct BlockForward {
    out: Tensor,
    cache: BlockCache,
    /// CLS-row attention logits over patch tokens [B x M], when requested.
    cls_logits: Option<Tensor>,
}

fn block_forward(
    params: &BlockParams,
    adapter: &LoraAdapter,
    cfg: &ModelConfig,
    x: &Tensor,
    capture_cls: bool,
) -> Result<BlockForward, ModelError> {
    let (bsz, l, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let isc = 1.0 / (d as f64).sqrt();
    let site = cfg.lora_site;
    let weight = |s: LoraSite| -> Tensor {
        if s == site {
            effective_weight(params.site(s), adapter, cfg.lora_scale)
        } else {
            params.site(s).clone()
        }
    };
    let (wq, wk, wv, wo) = (
        weight(LoraSite::Query),
        weight(LoraSite::Key),
        weight(LoraSite::Value),
        weight(LoraSite::Output),
    );

    let x1 = layer_norm(x, &params.ln1_gamma, &params.ln1_beta, LN_EPS)?;
    let mut q = Tensor::zeros(&[bsz, l, d]);
    let mut k = Tensor::zeros(&[bsz, l, d]);
    let mut v = Tensor::zeros(&[bsz, l, d]);
    let mut probs = Tensor::zeros(&[bsz, l, l]);
    let mut att_out = Tensor::zeros(&[bsz, l, d]);
    let mut h = Tensor::zeros(&[bsz, l, d]);
    let mut cls_logits = capture_cls.then(|| Tensor::zeros(&[bsz, l - 1]));

    for b in 0..bsz {
        let xb = sample2d(&x1, b);
        let qb = matmul(&xb, &wq)?;
        let kb = matmul(&xb, &wk)?;
        let vb = matmul(&xb, &wv)?;
        // Scores s = q kᵀ / sqrt(D), then row softmax.
        let mut s = matmul(&qb, &transpose2(&kb))?;
        s.scale(isc);
        if let Some(cl) = cls_logits.as_mut() {
            // CLS row, patch columns 1..L: exactly the logits the attention
            // softmax below consumes.
            for j in 1..l {
                let val = s.at(&[0, j]);
                cl.set(&[b, j - 1], val);
            }
        }
        let pb = softmax_rows(&s);
        let ab = matmul(&pb, &vb)?;
        let proj = matmul(&ab, &wo)?;
        let mut hb = sample2d(x, b);
        hb.add_scaled(&proj, 1.0)?;
        set_sample2d(&mut q, b, &qb);
        set_sample2d(&mut k, b, &kb);
        set_sample2d(&mut v, b, &vb);
        set_sample2d(&mut probs, b, &pb);
        set_sample2d(&mut att_out, b, &ab);
        set_sample2d(&mut h, b, &hb);
    }

    let x2 = layer_norm(&h, &params.ln2_gamma, &params.ln2_beta, LN_EPS)?;
    let mut z1 = Tensor::zeros(&[bsz, l, 4 * d]);
    let mut g = Tensor::zeros(&[bsz, l, 4 * d]);
    let mut out = Tensor::zeros(&[bsz, l, d]);
    for b in 0..bsz {
        let x2b = sample2d(&x2, b);
        let z1b = matmul(&x2b, &params.w1)?;
        let gb = gelu(&z1b);
        let mlp = matmul(&gb, &params.w2)?;
        let mut ob = sample2d(&h, b);
        ob.add_scaled(&mlp, 1.0)?;
        set_sample2d(&mut z1, b, &z1b);
        set_sample2d(&mut g, b, &gb);
        set_sample2d(&mut out, b, &ob);
    }

    Ok(BlockForward {
        out,
        cache: BlockCache {
            x: x.clone(),
            x1,
            q,
            k,
            v,
            probs,
            att_out,
            h,
            x2,
            z1,
            g,
        },
        cls_logits,
    })
}

/// Backward through one block. Returns the gradient w.r.t. the block input
/// and the adapter gradient at the configured site. Backbone gradients are
/// computed only as far as needed to reach the input and the adapter.
fn block_backward(
    params: &BlockParams,
    adapter: &LoraAdapter,
    cfg: &ModelConfig,
    cache: &BlockCache,
    dout: &Tensor,
) -> Result<(Tensor, AdapterGrads), ModelError> {
    let (bsz, l, d) = (
        cache.x.shape()[0],
        cache.x.shape()[1],
        cache.x.shape()[2],
    );
    let isc = 1.0 / (d as f64).sqrt();
    let site = cfg.lora_site;
    let weight = |s: LoraSite| -> Tensor {
        if s == site {
            effective_weight(params.site(s), adapter, cfg.lora_scale)
        } else {
            params.site(s).clone()
        }
    };
    let (wq, wk, wv, wo) = (
        weight(LoraSite::Query),
        weight(LoraSite::Key),
        weight(LoraSite::Value),
        weight(LoraSite::Output),
    );

    // out = h + gelu(LN2(h) W1) W2.
    let mut dh = dout.clone();
    let mut dx2 = Tensor::zeros(&[bsz, l, d]);
    for b in 0..bsz {
        let dob = sample2d(dout, b);
        let gb = sample2d(&cache.g, b);
        let (dgb, _dw2) = matmul_backward(&dob, &gb, &params.w2)?;
        let z1b = sample2d(&cache.z1, b);
        let dz1b = gelu_backward(&z1b, &dgb);
        let x2b = sample2d(&cache.x2, b);
        let (dx2b, _dw1) = matmul_backward(&dz1b, &x2b, &params.w1)?;
        set_sample2d(&mut dx2, b, &dx2b);
    }
    let (dh_ln2, _, _) = layer_norm_backward(&cache.h, &params.ln2_gamma, LN_EPS, &dx2)?;
    dh.add_scaled(&dh_ln2, 1.0)?;

    // h = x + (probs V) Wo.
    let mut dx = dh.clone();
    let mut dx1 = Tensor::zeros(&[bsz, l, d]);
    // Accumulated gradient of the effective weight at the adapted site.
    let mut dw_site = Tensor::zeros(&[d, d]);
    for b in 0..bsz {
        let dhb = sample2d(&dh, b);
        let ab = sample2d(&cache.att_out, b);
        let (dab, dwo) = matmul_backward(&dhb, &ab, &wo)?;
        if site == LoraSite::Output {
            dw_site.add_scaled(&dwo, 1.0)?;
        }
        let pb = sample2d(&cache.probs, b);
        let vb = sample2d(&cache.v, b);
        let (dpb, dvb) = matmul_backward(&dab, &pb, &vb)?;
        let mut dsb = softmax_rows_backward(&pb, &dpb);
        dsb.scale(isc);
        // s_pre = q kᵀ (pre-scale); dq = ds_scaled k, dk = ds_scaledᵀ q.
        let qb = sample2d(&cache.q, b);
        let kb = sample2d(&cache.k, b);
        let dqb = matmul(&dsb, &kb)?;
        let dkb = matmul(&transpose2(&dsb), &qb)?;
        let x1b = sample2d(&cache.x1, b);
        let (dx1_q, dwq) = matmul_backward(&dqb, &x1b, &wq)?;
        let (dx1_k, dwk) = matmul_backward(&dkb, &x1b, &wk)?;
        let (dx1_v, dwv) = matmul_backward(&dvb, &x1b, &wv)?;
        match site {
            LoraSite::Query => dw_site.add_scaled(&dwq, 1.0)?,
            LoraSite::Key => dw_site.add_scaled(&dwk, 1.0)?,
            LoraSite::Value => dw_site.add_scaled(&dwv, 1.0)?,
            LoraSite::Output => {}
        }
        let mut dx1b = dx1_q;
        dx1b.add_scaled(&dx1_k, 1.0)?;
        dx1b.add_scaled(&dx1_v, 1.0)?;
        set_sample2d(&mut dx1, b, &dx1b);
    }
    let (dx_ln1, _, _) = layer_norm_backward(&cache.x, &params.ln1_gamma, LN_EPS, &dx1)?;
    dx.add_scaled(&dx_ln1, 1.0)?;

    // W_eff = W + scale · U V, so dU = scale · dW_eff Vᵀ, dV = scale · Uᵀ dW_eff.
    let mut du = matmul(&dw_site, &transpose2(&adapter.v))?;
    du.scale(cfg.lora_scale);
    let mut dv = matmul(&transpose2(&adapter.u), &dw_site)?;
    dv.scale(cfg.lora_scale);
    Ok((dx, AdapterGrads { du, dv }))
}

/// Device-side forward: embed patches, run blocks 1..=cut, capture the CLS
/// attention logits from the last device block.
pub fn device_forward(model: &SplitModel, batch: &Tensor) -> Result<DeviceForwardOutput, ModelError> {
    let cfg = &model.cfg;
    if batch.rank() != 2 || batch.shape()[1] != cfg.input_width() {
        return Err(ModelError::BatchWidth {
            got: if batch.rank() == 2 { batch.shape()[1] } else { 0 },
            want: cfg.input_width(),
        });
    }
    let (bsz, m, p, d) = (batch.shape()[0], cfg.patch_tokens, cfg.patch_dim, cfg.embed_dim);

    // Embed: token 0 = cls + pos0, token i = patch_i · proj + pos_i.
    let mut x = Tensor::zeros(&[bsz, m + 1, d]);
    for b in 0..bsz {
        for j in 0..d {
            x.set(&[b, 0, j], model.embed.cls.data()[j] + model.embed.pos.at(&[0, j]));
        }
        for i in 1..=m {
            let patch = &batch.data()[b * m * p + (i - 1) * p..b * m * p + i * p];
            for j in 0..d {
                let mut acc = 0.0;
                for t in 0..p {
                    acc += patch[t] * model.embed.proj.at(&[t, j]);
                }
                x.set(&[b, i, j], acc + model.embed.pos.at(&[i, j]));
            }
        }
    }

    let mut caches = Vec::with_capacity(cfg.cut);
    let mut cls_logits = None;
    for li in 0..cfg.cut {
        let capture = li == cfg.cut - 1;
        let fwd = block_forward(
            &model.blocks[li],
            &model.device_adapters[li],
            cfg,
            &x,
            capture,
        )?;
        x = fwd.out;
        caches.push(fwd.cache);
        if capture {
            cls_logits = fwd.cls_logits;
        }
    }
    debug_assert!(x.all_finite(), "device activations non-finite");
    Ok(DeviceForwardOutput {
        activations: x,
        cls_patch_logits: cls_logits.expect("cut >= 1 always captures CLS logits"),
        cache: LayerStackCache {
            blocks: caches,
            version: model.version,
        },
    })
}

/// Server-side forward: blocks cut+1..=E on the received activations, then
/// the final layer norm and classifier head applied to the CLS token. `acts`
/// may have any token count L >= 1 (compressed sequences are shorter than
/// M + 1).
pub fn server_forward(
    model: &SplitModel,
    acts: &Tensor,
) -> Result<(Tensor, ServerForwardCache), ModelError> {
    let cfg = &model.cfg;
    if acts.rank() != 3 || acts.shape()[2] != cfg.embed_dim {
        return Err(ModelError::Config(format!(
            "server activations shape {:?}, expected [B x L x {}]",
            acts.shape(),
            cfg.embed_dim
        )));
    }
    let mut x = acts.clone();
    let mut caches = Vec::with_capacity(cfg.blocks - cfg.cut);
    for li in cfg.cut..cfg.blocks {
        let fwd = block_forward(
            &model.blocks[li],
            &model.server_adapters[li - cfg.cut],
            cfg,
            &x,
            false,
        )?;
        x = fwd.out;
        caches.push(fwd.cache);
    }
    let (bsz, d) = (x.shape()[0], cfg.embed_dim);
    let mut cls = Tensor::zeros(&[bsz, d]);
    for b in 0..bsz {
        for j in 0..d {
            let val = x.at(&[b, 0, j]);
            cls.set(&[b, j], val);
        }
    }
    let normed = layer_norm(&cls, &model.final_gamma, &model.final_beta, LN_EPS)?;
    let logits = matmul(&normed, &model.head)?;
    Ok((
        logits,
        ServerForwardCache {
            cache: LayerStackCache {
                blocks: caches,
                version: model.version,
            },
            final_acts: x,
            normed_cls: normed,
        },
    ))
}

/// Server-side backward from logits gradient to adapter/head gradients and
/// the gradient w.r.t. the received activations.
pub fn server_backward(
    model: &SplitModel,
    cache: &ServerForwardCache,
    dlogits: &Tensor,
) -> Result<ServerBackward, ModelError> {
    if cache.cache.version != model.version {
        return Err(ModelError::StaleCache);
    }
    let cfg = &model.cfg;
    let (bsz, l, d) = (
        cache.final_acts.shape()[0],
        cache.final_acts.shape()[1],
        cache.final_acts.shape()[2],
    );
    let mut cls = Tensor::zeros(&[bsz, d]);
    for b in 0..bsz {
        for j in 0..d {
            let val = cache.final_acts.at(&[b, 0, j]);
            cls.set(&[b, j], val);
        }
    }
    let (dnormed, head_grad) = matmul_backward(dlogits, &cache.normed_cls, &model.head)?;
    // The final norm's affine is frozen at identity, so its parameter
    // gradients are discarded; only the input gradient propagates.
    let (dcls, _, _) = layer_norm_backward(&cls, &model.final_gamma, LN_EPS, &dnormed)?;
    let mut dx = Tensor::zeros(&[bsz, l, d]);
    for b in 0..bsz {
        for j in 0..d {
            let val = dcls.at(&[b, j]);
            dx.set(&[b, 0, j], val);
        }
    }
    let nblocks = cfg.blocks - cfg.cut;
    let mut adapter_grads = vec![AdapterGrads::zeros(d, cfg.rank); nblocks];
    for li in (0..nblocks).rev() {
        let (dxi, ag) = block_backward(
            &model.blocks[cfg.cut + li],
            &model.server_adapters[li],
            cfg,
            &cache.cache.blocks[li],
            &dx,
        )?;
        dx = dxi;
        adapter_grads[li] = ag;
    }
    Ok(ServerBackward {
        adapter_grads,
        head_grad,
        dacts: dx,
    })
}

/// Device-side backward from the scattered activation gradient to the device
/// adapter gradients. The gradient into the frozen embedder is discarded.
pub fn device_backward(
    model: &SplitModel,
    out: &DeviceForwardOutput,
    dacts: &Tensor,
) -> Result<Vec<AdapterGrads>, ModelError> {
    if out.cache.version != model.version {
        return Err(ModelError::StaleCache);
    }
    let cfg = &model.cfg;
    if dacts.shape() != out.activations.shape() {
        return Err(ModelError::Shape(ShapeError::Incompatible {
            op: "device_backward",
            lhs: dacts.shape().to_vec(),
            rhs: out.activations.shape().to_vec(),
        }));
    }
    let mut dx = dacts.clone();
    let mut grads = vec![AdapterGrads::zeros(cfg.embed_dim, cfg.rank); cfg.cut];
    for li in (0..cfg.cut).rev() {
        let (dxi, ag) = block_backward(
            &model.blocks[li],
            &model.device_adapters[li],
            cfg,
            &out.cache.blocks[li],
            &dx,
        )?;
        dx = dxi;
        grads[li] = ag;
    }
    Ok(grads)
}

/// Convenience: mean cross-entropy loss and logits gradient.
pub fn loss_and_dlogits(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor), ModelError> {
    Ok(cross_entropy(logits, labels)?)
}

// ---------------------------------------------------------------------------
// Checkpoint I/O: little-endian binary, magic "TSFL", version, config, then
// all tensors in declaration order as f64.

fn write_u16(w: &mut impl Write, v: u16) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn write_tensor(w: &mut impl Write, t: &Tensor) -> std::io::Result<()> {
    for &x in t.data() {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn read_u16(r: &mut impl Read) -> std::io::Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_tensor(r: &mut impl Read, shape: &[usize]) -> Result<Tensor, ModelError> {
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    let mut b = [0u8; 8];
    for _ in 0..n {
        r.read_exact(&mut b)?;
        data.push(f64::from_le_bytes(b));
    }
    Ok(Tensor::new(shape, data)?)
}

impl SplitModel {
    /// Tensors in checkpoint order, paired with their shapes.
    fn tensor_order(&self) -> Vec<&Tensor> {
        let mut ts = vec![&self.embed.proj, &self.embed.cls, &self.embed.pos];
        for blk in &self.blocks {
            ts.extend([
                &blk.w_q,
                &blk.w_k,
                &blk.w_v,
                &blk.w_o,
                &blk.w1,
                &blk.w2,
                &blk.ln1_gamma,
                &blk.ln1_beta,
                &blk.ln2_gamma,
                &blk.ln2_beta,
            ]);
        }
        ts.push(&self.final_gamma);
        ts.push(&self.final_beta);
        for a in self.device_adapters.iter().chain(&self.server_adapters) {
            ts.push(&a.u);
            ts.push(&a.v);
        }
        ts.push(&self.head);
        ts
    }

    /// Serialize to the checkpoint format.
    pub fn save(&self, w: &mut impl Write) -> Result<(), ModelError> {
        w.write_all(&CHECKPOINT_MAGIC)?;
        write_u16(w, CHECKPOINT_VERSION)?;
        for v in [
            self.cfg.blocks,
            self.cfg.embed_dim,
            self.cfg.patch_tokens,
            self.cfg.patch_dim,
            self.cfg.heads,
            self.cfg.rank,
            self.cfg.classes,
            self.cfg.cut,
        ] {
            write_u16(
                w,
                u16::try_from(v).map_err(|_| {
                    ModelError::BadCheckpoint(format!("config value {v} exceeds u16"))
                })?,
            )?;
        }
        w.write_all(&[self.cfg.lora_site.as_u8()])?;
        w.write_all(&self.cfg.lora_scale.to_le_bytes())?;
        for t in self.tensor_order() {
            write_tensor(w, t)?;
        }
        Ok(())
    }

    /// Deserialize from the checkpoint format.
    pub fn load(r: &mut impl Read) -> Result<SplitModel, ModelError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(ModelError::BadCheckpoint(format!("bad magic {magic:?}")));
        }
        let ver = read_u16(r)?;
        if ver != CHECKPOINT_VERSION {
            return Err(ModelError::BadCheckpoint(format!("unknown version {ver}")));
        }
        let mut vals = [0usize; 8];
        for v in &mut vals {
            *v = read_u16(r)? as usize;
        }
        let mut site_b = [0u8; 1];
        r.read_exact(&mut site_b)?;
        let mut scale_b = [0u8; 8];
        r.read_exact(&mut scale_b)?;
        let cfg = ModelConfig {
            blocks: vals[0],
            embed_dim: vals[1],
            patch_tokens: vals[2],
            patch_dim: vals[3],
            heads: vals[4],
            rank: vals[5],
            classes: vals[6],
            cut: vals[7],
            lora_site: LoraSite::from_u8(site_b[0])?,
            lora_scale: f64::from_le_bytes(scale_b),
        };
        cfg.validate()
            .map_err(|e| ModelError::BadCheckpoint(e.to_string()))?;
        let d = cfg.embed_dim;
        let embed = Embedder {
            proj: read_tensor(r, &[cfg.patch_dim, d])?,
            cls: read_tensor(r, &[d])?,
            pos: read_tensor(r, &[cfg.patch_tokens + 1, d])?,
        };
        let mut blocks = Vec::with_capacity(cfg.blocks);
        for _ in 0..cfg.blocks {
            blocks.push(BlockParams {
                w_q: read_tensor(r, &[d, d])?,
                w_k: read_tensor(r, &[d, d])?,
                w_v: read_tensor(r, &[d, d])?,
                w_o: read_tensor(r, &[d, d])?,
                w1: read_tensor(r, &[d, 4 * d])?,
                w2: read_tensor(r, &[4 * d, d])?,
                ln1_gamma: read_tensor(r, &[d])?,
                ln1_beta: read_tensor(r, &[d])?,
                ln2_gamma: read_tensor(r, &[d])?,
                ln2_beta: read_tensor(r, &[d])?,
            });
        }
        let final_gamma = read_tensor(r, &[d])?;
        let final_beta = read_tensor(r, &[d])?;
        let mut adapters = Vec::with_capacity(cfg.blocks);
        for _ in 0..cfg.blocks {
            adapters.push(LoraAdapter {
                u: read_tensor(r, &[d, cfg.rank])?,
                v: read_tensor(r, &[cfg.rank, d])?,
            });
        }
        let server_adapters = adapters.split_off(cfg.cut);
        let head = read_tensor(r, &[d, cfg.classes])?;
        // Reject trailing garbage.
        let mut probe = [0u8; 1];
        if r.read(&mut probe)? != 0 {
            return Err(ModelError::BadCheckpoint("trailing bytes".into()));
        }
        let model = SplitModel {
            cfg,
            embed,
            blocks,
            final_gamma,
            final_beta,
            device_adapters: adapters,
            server_adapters,
            head,
            version: 1,
        };
        for t in model.tensor_order() {
            if !t.all_finite() {
                return Err(ModelError::BadCheckpoint("non-finite parameter".into()));
            }
        }
        Ok(model)
    }
}
