//! Shared helpers for the integration suites: finite-difference tolerances
//! and the frozen-coefficient pipeline used to validate the end-to-end
//! gradient path.

#![allow(dead_code)]

use tsfl_core::compress::{cls_scores, grad_scatter, refine, RefinedActivations};
use tsfl_core::model::{
    device_backward, device_forward, init_model, loss_and_dlogits, server_backward,
    server_forward, AdapterGrads, LoraAdapter, LoraSite, ModelConfig, SplitModel,
};
use tsfl_core::rng::{Rng, STREAM_INIT};
use tsfl_core::tensor::Tensor;

pub const H: f64 = 1e-5;
pub const PIPELINE_TOL: f64 = 1e-5;
/// Absolute floor below which central differences are pure rounding noise:
/// subtracting two O(1) losses loses ~1e-16/2h ~ 5e-12 per evaluation.
pub const PIPELINE_ATOL: f64 = 2e-9;

/// Combined-tolerance agreement: |a - b| <= atol + rtol * max(|a|, |b|).
pub fn agree(a: f64, b: f64, rtol: f64, atol: f64) -> bool {
    (a - b).abs() <= atol + rtol * a.abs().max(b.abs())
}

pub fn pipeline_cfg() -> ModelConfig {
    ModelConfig {
        blocks: 2,
        embed_dim: 8,
        patch_tokens: 4,
        patch_dim: 6,
        heads: 1,
        rank: 2,
        classes: 3,
        cut: 1,
        lora_site: LoraSite::Query,
        lora_scale: 1.0,
    }
}

/// A model whose adapters are all away from the zero-V origin, so every
/// gradient path is generically nonzero.
pub fn lively_model(seed: u64) -> SplitModel {
    let cfg = pipeline_cfg();
    let mut rng = Rng::derive(seed, &[STREAM_INIT]);
    let mut model = init_model(&cfg, &mut rng).unwrap();
    let mut wiggle = |adapters: &[LoraAdapter]| -> Vec<LoraAdapter> {
        adapters
            .iter()
            .map(|a| LoraAdapter {
                u: Tensor::from_fn(a.u.shape(), || 0.1 * rng.normal()),
                v: Tensor::from_fn(a.v.shape(), || 0.1 * rng.normal()),
            })
            .collect()
    };
    let dev = wiggle(model.device_adapters());
    let srv = wiggle(model.server_adapters());
    model.set_device_adapters(dev).unwrap();
    let head = model.head().clone();
    model.set_server_state(srv, head).unwrap();
    model
}

/// Addressable trainable scalar inside the model.
#[derive(Clone, Copy)]
pub enum Slot {
    DevU(usize, usize),
    DevV(usize, usize),
    SrvU(usize, usize),
    SrvV(usize, usize),
    Head(usize),
}

pub fn all_slots(model: &SplitModel) -> Vec<Slot> {
    let mut slots = Vec::new();
    for (b, a) in model.device_adapters().iter().enumerate() {
        slots.extend((0..a.u.numel()).map(|i| Slot::DevU(b, i)));
        slots.extend((0..a.v.numel()).map(|i| Slot::DevV(b, i)));
    }
    for (b, a) in model.server_adapters().iter().enumerate() {
        slots.extend((0..a.u.numel()).map(|i| Slot::SrvU(b, i)));
        slots.extend((0..a.v.numel()).map(|i| Slot::SrvV(b, i)));
    }
    slots.extend((0..model.head().numel()).map(Slot::Head));
    slots
}

pub fn nudged(model: &SplitModel, slot: Slot, eps: f64) -> SplitModel {
    let mut m = model.clone();
    match slot {
        Slot::DevU(b, i) | Slot::DevV(b, i) => {
            let mut ad = m.device_adapters().to_vec();
            let t = if matches!(slot, Slot::DevU(..)) {
                &mut ad[b].u
            } else {
                &mut ad[b].v
            };
            t.data_mut()[i] += eps;
            m.set_device_adapters(ad).unwrap();
        }
        Slot::SrvU(b, i) | Slot::SrvV(b, i) => {
            let mut ad = m.server_adapters().to_vec();
            let t = if matches!(slot, Slot::SrvU(..)) {
                &mut ad[b].u
            } else {
                &mut ad[b].v
            };
            t.data_mut()[i] += eps;
            let head = m.head().clone();
            m.set_server_state(ad, head).unwrap();
        }
        Slot::Head(i) => {
            let mut head = m.head().clone();
            head.data_mut()[i] += eps;
            let ad = m.server_adapters().to_vec();
            m.set_server_state(ad, head).unwrap();
        }
    }
    m
}

pub struct PipelineGrads {
    pub device: Vec<AdapterGrads>,
    pub server: Vec<AdapterGrads>,
    pub head: Tensor,
}

pub fn analytic_at(slot: Slot, grads: &PipelineGrads) -> f64 {
    match slot {
        Slot::DevU(b, i) => grads.device[b].du.data()[i],
        Slot::DevV(b, i) => grads.device[b].dv.data()[i],
        Slot::SrvU(b, i) => grads.server[b].du.data()[i],
        Slot::SrvV(b, i) => grads.server[b].dv.data()[i],
        Slot::Head(i) => grads.head.data()[i],
    }
}

/// Apply the refinement as a linear map with coefficients frozen from a
/// reference: gather CLS and the reference-selected tokens, and rebuild the
/// merged token from the reference merge weights.
pub fn frozen_refine(acts: &Tensor, reference: &RefinedActivations, m: usize) -> Tensor {
    let (bsz, k2, d) = (
        reference.tokens.shape()[0],
        reference.tokens.shape()[1],
        reference.tokens.shape()[2],
    );
    let k = k2 - 2;
    let mut out = Tensor::zeros(&[bsz, k2, d]);
    for b in 0..bsz {
        for j in 0..d {
            let val = acts.at(&[b, 0, j]);
            out.set(&[b, 0, j], val);
        }
        for (slot, &idx) in reference.indices[b * k..(b + 1) * k].iter().enumerate() {
            for j in 0..d {
                let val = acts.at(&[b, idx as usize, j]);
                out.set(&[b, 1 + slot, j], val);
            }
        }
        if reference.merged_present {
            for i in 1..=m {
                let w = reference.merge_weights.at(&[b, i - 1]);
                if w != 0.0 {
                    for j in 0..d {
                        let acc = out.at(&[b, k + 1, j]) + w * acts.at(&[b, i, j]);
                        out.set(&[b, k + 1, j], acc);
                    }
                }
            }
        }
    }
    out
}

/// [B x (K+2) x D] refined tokens -> what the server consumes (the empty
/// merged slot is dropped when no tokens were discarded).
pub fn server_view(tokens: &Tensor, merged_present: bool) -> Tensor {
    if merged_present {
        return tokens.clone();
    }
    let (b, l, d) = (tokens.shape()[0], tokens.shape()[1], tokens.shape()[2]);
    let mut data = Vec::with_capacity(b * (l - 1) * d);
    for bi in 0..b {
        let start = bi * l * d;
        data.extend_from_slice(&tokens.data()[start..start + (l - 1) * d]);
    }
    Tensor::new(&[b, l - 1, d], data).unwrap()
}

/// Deterministic pipeline loss with refinement coefficients frozen from
/// `reference`, matching the adjoint the backward pass implements.
pub fn pipeline_loss(
    model: &SplitModel,
    x: &Tensor,
    labels: &[usize],
    reference: &RefinedActivations,
    m: usize,
) -> f64 {
    let dev = device_forward(model, x).unwrap();
    let tokens = frozen_refine(&dev.activations, reference, m);
    let server_in = server_view(&tokens, reference.merged_present);
    let (logits, _) = server_forward(model, &server_in).unwrap();
    loss_and_dlogits(&logits, labels).unwrap().0
}

/// Analytic gradients along the exact same frozen path.
pub fn pipeline_grads(
    model: &SplitModel,
    x: &Tensor,
    labels: &[usize],
    reference: &RefinedActivations,
    m: usize,
) -> PipelineGrads {
    let dev = device_forward(model, x).unwrap();
    let tokens = frozen_refine(&dev.activations, reference, m);
    let server_in = server_view(&tokens, reference.merged_present);
    let (logits, cache) = server_forward(model, &server_in).unwrap();
    let (_, dlogits) = loss_and_dlogits(&logits, labels).unwrap();
    let sb = server_backward(model, &cache, &dlogits).unwrap();
    let dtokens = if reference.merged_present {
        sb.dacts.clone()
    } else {
        let (b, l, d) = (sb.dacts.shape()[0], sb.dacts.shape()[1], sb.dacts.shape()[2]);
        let mut padded = Tensor::zeros(&[b, l + 1, d]);
        for bi in 0..b {
            for li in 0..l {
                for di in 0..d {
                    let val = sb.dacts.at(&[bi, li, di]);
                    padded.set(&[bi, li, di], val);
                }
            }
        }
        padded
    };
    let dacts = grad_scatter(&dtokens, reference, m).unwrap();
    let device = device_backward(model, &dev, &dacts).unwrap();
    PipelineGrads {
        device,
        server: sb.adapter_grads,
        head: sb.head_grad,
    }
}

/// FD-check every trainable scalar of the frozen pipeline at `kept` tokens.
pub fn run_pipeline_check(kept: usize, seed: u64) {
    let model = lively_model(seed);
    let cfg = &model.cfg;
    let m = cfg.patch_tokens;
    let mut rng = Rng::derive(seed, &[7]);
    let x = Tensor::from_fn(&[2, cfg.input_width()], || rng.normal());
    let labels = vec![0usize, 2];
    // Freeze the refinement coefficients the real pipeline would pick at
    // the base parameters.
    let dev = device_forward(&model, &x).unwrap();
    let scores = cls_scores(&dev.cls_patch_logits).unwrap();
    let reference = refine(&dev.activations, &scores, kept).unwrap();

    let grads = pipeline_grads(&model, &x, &labels, &reference, m);
    for (si, &slot) in all_slots(&model).iter().enumerate() {
        let hi = pipeline_loss(&nudged(&model, slot, H), &x, &labels, &reference, m);
        let lo = pipeline_loss(&nudged(&model, slot, -H), &x, &labels, &reference, m);
        let fd = (hi - lo) / (2.0 * H);
        let an = analytic_at(slot, &grads);
        assert!(
            agree(fd, an, PIPELINE_TOL, PIPELINE_ATOL),
            "K={kept}: slot {si} FD {fd} vs analytic {an}"
        );
    }
}
