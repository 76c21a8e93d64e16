//! Token-compressed split federated LoRA fine-tuning, desk scale.
//!
//! A tiny vision transformer is cut at a configurable layer: devices run the
//! embedder and the first `e` blocks, a simulated server runs the rest plus the
//! classifier head. Devices keep the backbone frozen and train low-rank (LoRA)
//! adapters; boundary activations are compressed with CLS-attention token
//! selection + merging and stochastic low-bit quantization before crossing the
//! wire. Everything is f64 internally, deterministic under a single seed, and
//! written for exactness over speed.
//!
//! Module map:
//! - [`tensor`], [`rng`], [`ops`]: flat row-major f64 tensors, a documented
//!   deterministic PRNG, and hand-derived forward/backward kernels.
//! - [`model`]: split ViT with per-block LoRA adapters and manual backprop.
//! - [`compress`]: token selection/merging, stochastic quantizer, exact
//!   adjoint for the gradient path.
//! - [`wire`]: bit-exact message encoding (`.tsfa`) and payload accounting.
//! - [`data`]: synthetic dataset, CSV I/O, Dirichlet non-IID partitioning.
//! - [`sim`]: federated round loop, FedAvg, cost models, evaluation.
//! - [`analysis`]: convergence-penalty formulas and the (e, K, q) grid search.

#![forbid(unsafe_code)]
// The math kernels walk several arrays with one semantic index (1-based
// token ids, patch offsets); iterator-with-enumerate rewrites obscure that.
#![allow(clippy::needless_range_loop)]

pub mod analysis;
pub mod compress;
pub mod data;
pub mod model;
pub mod ops;
pub mod rng;
pub mod sim;
pub mod tensor;
pub mod wire;
