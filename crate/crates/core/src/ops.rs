//! Numeric kernels with hand-derived backward passes.
//!
//! Every kernel uses a fixed loop order and plain accumulation so results are
//! bit-reproducible across runs; nothing here reassociates sums or
//! parallelizes. Backward functions take the upstream gradient and return
//! gradients for each differentiable input, matching the shapes of the
//! forward arguments.

use crate::tensor::{ShapeError, Tensor};

/// Tanh-approximation GELU coefficient sqrt(2/pi).
const GELU_S: f64 = 0.797_884_560_802_865_4;
/// Cubic coefficient of the tanh-approximation GELU.
const GELU_C: f64 = 0.044715;

/// Matrix product of 2-D tensors: [m x k] · [k x n] -> [m x n].
/// Accumulation runs over the shared dimension innermost, in index order.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor, ShapeError> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(ShapeError::Incompatible {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let mut out = Tensor::zeros(&[m, n]);
    let (ad, bd, od) = (a.data(), b.data(), out.data_mut());
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for p in 0..k {
                acc += ad[i * k + p] * bd[p * n + j];
            }
            od[i * n + j] = acc;
        }
    }
    debug_assert!(out.all_finite(), "matmul produced a non-finite value");
    Ok(out)
}

/// Transpose of a 2-D tensor.
pub fn transpose2(a: &Tensor) -> Tensor {
    assert_eq!(a.rank(), 2, "transpose2 expects rank 2");
    let (m, n) = (a.shape()[0], a.shape()[1]);
    let mut out = Tensor::zeros(&[n, m]);
    for i in 0..m {
        for j in 0..n {
            let v = a.data()[i * n + j];
            out.data_mut()[j * m + i] = v;
        }
    }
    out
}

/// Gradients of `matmul(a, b)` given upstream `dout`:
/// da = dout · bᵀ, db = aᵀ · dout.
pub fn matmul_backward(
    dout: &Tensor,
    a: &Tensor,
    b: &Tensor,
) -> Result<(Tensor, Tensor), ShapeError> {
    let da = matmul(dout, &transpose2(b))?;
    let db = matmul(&transpose2(a), dout)?;
    Ok((da, db))
}

/// Row-wise softmax over the last dimension, with max subtraction for
/// stability. Works for any rank >= 1.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let d = *x.shape().last().expect("softmax_rows on rank-0 tensor");
    let rows = x.numel() / d;
    let mut out = Tensor::zeros(x.shape());
    for r in 0..rows {
        let xi = &x.data()[r * d..(r + 1) * d];
        let oi = &mut out.data_mut()[r * d..(r + 1) * d];
        let mut mx = f64::NEG_INFINITY;
        for &v in xi {
            mx = mx.max(v);
        }
        let mut denom = 0.0;
        for (o, &v) in oi.iter_mut().zip(xi) {
            *o = (v - mx).exp();
            denom += *o;
        }
        for o in oi.iter_mut() {
            *o /= denom;
        }
    }
    debug_assert!(out.all_finite(), "softmax produced a non-finite value");
    out
}

/// Gradient of `softmax_rows` expressed in terms of its output `probs`:
/// dx = p ⊙ (dprobs − Σ_j dprobs_j p_j) per row.
pub fn softmax_rows_backward(probs: &Tensor, dprobs: &Tensor) -> Tensor {
    assert_eq!(probs.shape(), dprobs.shape(), "softmax backward shapes");
    let d = *probs.shape().last().unwrap();
    let rows = probs.numel() / d;
    let mut dx = Tensor::zeros(probs.shape());
    for r in 0..rows {
        let p = &probs.data()[r * d..(r + 1) * d];
        let dp = &dprobs.data()[r * d..(r + 1) * d];
        let mut dot = 0.0;
        for j in 0..d {
            dot += dp[j] * p[j];
        }
        let o = &mut dx.data_mut()[r * d..(r + 1) * d];
        for j in 0..d {
            o[j] = p[j] * (dp[j] - dot);
        }
    }
    dx
}

/// Layer normalization over the last dimension with learned per-feature
/// affine: out = gamma * (x - mean) / sqrt(var + eps) + beta.
pub fn layer_norm(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<Tensor, ShapeError> {
    assert!(eps > 0.0, "layer_norm eps must be positive");
    let d = *x.shape().last().expect("layer_norm on rank-0 tensor");
    if gamma.shape() != [d] || beta.shape() != [d] {
        return Err(ShapeError::Incompatible {
            op: "layer_norm",
            lhs: x.shape().to_vec(),
            rhs: gamma.shape().to_vec(),
        });
    }
    let rows = x.numel() / d;
    let mut out = Tensor::zeros(x.shape());
    for r in 0..rows {
        let xi = &x.data()[r * d..(r + 1) * d];
        let (mean, rstd) = row_stats(xi, eps);
        let oi = &mut out.data_mut()[r * d..(r + 1) * d];
        for j in 0..d {
            oi[j] = gamma.data()[j] * (xi[j] - mean) * rstd + beta.data()[j];
        }
    }
    debug_assert!(out.all_finite(), "layer_norm produced a non-finite value");
    Ok(out)
}

fn row_stats(xi: &[f64], eps: f64) -> (f64, f64) {
    let d = xi.len() as f64;
    let mut mean = 0.0;
    for &v in xi {
        mean += v;
    }
    mean /= d;
    let mut var = 0.0;
    for &v in xi {
        var += (v - mean) * (v - mean);
    }
    var /= d;
    (mean, 1.0 / (var + eps).sqrt())
}

/// Gradients of `layer_norm`; statistics are recomputed from `x`, which is
/// bit-identical to the forward pass. Returns (dx, dgamma, dbeta); the affine
/// gradients are summed over all rows.
pub fn layer_norm_backward(
    x: &Tensor,
    gamma: &Tensor,
    eps: f64,
    dout: &Tensor,
) -> Result<(Tensor, Tensor, Tensor), ShapeError> {
    assert_eq!(x.shape(), dout.shape(), "layer_norm backward shapes");
    let d = *x.shape().last().unwrap();
    if gamma.shape() != [d] {
        return Err(ShapeError::Incompatible {
            op: "layer_norm_backward",
            lhs: x.shape().to_vec(),
            rhs: gamma.shape().to_vec(),
        });
    }
    let rows = x.numel() / d;
    let mut dx = Tensor::zeros(x.shape());
    let mut dgamma = Tensor::zeros(&[d]);
    let mut dbeta = Tensor::zeros(&[d]);
    for r in 0..rows {
        let xi = &x.data()[r * d..(r + 1) * d];
        let doi = &dout.data()[r * d..(r + 1) * d];
        let (mean, rstd) = row_stats(xi, eps);
        // dxhat_j = dout_j * gamma_j; dx follows the standard two-moment form
        // dx = rstd * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat)).
        let mut m1 = 0.0;
        let mut m2 = 0.0;
        for j in 0..d {
            let xhat = (xi[j] - mean) * rstd;
            let dxhat = doi[j] * gamma.data()[j];
            m1 += dxhat;
            m2 += dxhat * xhat;
        }
        m1 /= d as f64;
        m2 /= d as f64;
        let dxi = &mut dx.data_mut()[r * d..(r + 1) * d];
        for j in 0..d {
            let xhat = (xi[j] - mean) * rstd;
            let dxhat = doi[j] * gamma.data()[j];
            dxi[j] = rstd * (dxhat - m1 - xhat * m2);
            dgamma.data_mut()[j] += doi[j] * xhat;
            dbeta.data_mut()[j] += doi[j];
        }
    }
    Ok((dx, dgamma, dbeta))
}

/// Elementwise GELU, tanh approximation:
/// 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
pub fn gelu(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for v in out.data_mut() {
        *v = gelu_scalar(*v);
    }
    out
}

fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_S * (x + GELU_C * x * x * x)).tanh())
}

/// Elementwise gradient of the tanh-approximation GELU.
pub fn gelu_backward(x: &Tensor, dout: &Tensor) -> Tensor {
    assert_eq!(x.shape(), dout.shape(), "gelu backward shapes");
    let mut dx = Tensor::zeros(x.shape());
    for ((d, &xv), &g) in dx.data_mut().iter_mut().zip(x.data()).zip(dout.data()) {
        let u = GELU_S * (xv + GELU_C * xv * xv * xv);
        let t = u.tanh();
        let sech2 = 1.0 - t * t;
        let du = GELU_S * (1.0 + 3.0 * GELU_C * xv * xv);
        *d = g * (0.5 * (1.0 + t) + 0.5 * xv * sech2 * du);
    }
    dx
}

/// Mean cross-entropy of logits [B x C] against integer labels, plus the
/// gradient w.r.t. the logits: (softmax - onehot) / B. Uses a stable
/// log-sum-exp; labels outside [0, C) are an error.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor), ShapeError> {
    if logits.rank() != 2 || logits.shape()[0] != labels.len() {
        return Err(ShapeError::Incompatible {
            op: "cross_entropy",
            lhs: logits.shape().to_vec(),
            rhs: vec![labels.len()],
        });
    }
    let (b, c) = (logits.shape()[0], logits.shape()[1]);
    for (i, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(ShapeError::Incompatible {
                op: "cross_entropy label out of range",
                lhs: vec![i, y],
                rhs: vec![c],
            });
        }
    }
    let probs = softmax_rows(logits);
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let zi = &logits.data()[i * c..(i + 1) * c];
        let mut mx = f64::NEG_INFINITY;
        for &v in zi {
            mx = mx.max(v);
        }
        let mut lse = 0.0;
        for &v in zi {
            lse += (v - mx).exp();
        }
        loss += mx + lse.ln() - zi[y];
    }
    loss /= b as f64;
    let mut dlogits = probs;
    for (i, &y) in labels.iter().enumerate() {
        let row = &mut dlogits.data_mut()[i * c..(i + 1) * c];
        row[y] -= 1.0;
        for v in row.iter_mut() {
            *v /= b as f64;
        }
    }
    Ok((loss, dlogits))
}
