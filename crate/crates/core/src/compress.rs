//! Token compression for boundary activations: CLS-attention selection and
//! merging, stochastic low-bit quantization, and the exact adjoint used on
//! the gradient path.
//!
//! Forward: `refine` keeps the CLS token plus the K highest-scoring patch
//! tokens and folds the discarded ones into a single merged token (weighted
//! by their attention mass); `quantize` then maps every value onto a uniform
//! grid between the smallest and largest absolute entries with unbiased
//! stochastic rounding, storing signs separately. Backward: the quantizer is
//! a straight-through identity, and `grad_scatter` is the exact adjoint of
//! the (selection-and-merge-weights-frozen) linear refine map.

use thiserror::Error;

use crate::ops::softmax_rows;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Errors from compression ops.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum CompressError {
    #[error("K = {k} must lie in [1, M = {m}]")]
    KRange { k: usize, m: usize },
    #[error("{what}: expected shape {want}, got {got}")]
    BadShape {
        what: &'static str,
        want: String,
        got: String,
    },
    #[error("scores contain a non-finite value")]
    NonFinite,
    #[error("unsupported bit width {0}; allowed: 2, 4, 8, 16, 32")]
    BadBitWidth(u8),
    #[error("quantized payload corrupt: {0}")]
    Corrupt(String),
    #[error("patch index {idx} outside [1, {m}]")]
    IndexRange { idx: usize, m: usize },
}

/// Allowed quantizer bit widths. Serialized as the bit count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum BitWidth {
    Q2,
    Q4,
    Q8,
    Q16,
    Q32,
}

impl BitWidth {
    pub const ALL: [BitWidth; 5] = [
        BitWidth::Q2,
        BitWidth::Q4,
        BitWidth::Q8,
        BitWidth::Q16,
        BitWidth::Q32,
    ];

    pub fn bits(self) -> u32 {
        match self {
            BitWidth::Q2 => 2,
            BitWidth::Q4 => 4,
            BitWidth::Q8 => 8,
            BitWidth::Q16 => 16,
            BitWidth::Q32 => 32,
        }
    }

    /// Number of grid intervals: 2^q - 1. Also the largest valid code.
    pub fn intervals(self) -> u64 {
        (1u64 << self.bits()) - 1
    }

    pub fn from_bits(q: u8) -> Result<Self, CompressError> {
        Ok(match q {
            2 => BitWidth::Q2,
            4 => BitWidth::Q4,
            8 => BitWidth::Q8,
            16 => BitWidth::Q16,
            32 => BitWidth::Q32,
            other => return Err(CompressError::BadBitWidth(other)),
        })
    }
}

impl From<BitWidth> for u8 {
    fn from(q: BitWidth) -> u8 {
        q.bits() as u8
    }
}

impl TryFrom<u8> for BitWidth {
    type Error = CompressError;

    fn try_from(q: u8) -> Result<Self, CompressError> {
        BitWidth::from_bits(q)
    }
}

/// Compression settings: tokens kept (K) and quantizer width (q).
/// K = M with q = 32 is the identity pipeline used for baseline runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct CompressionConfig {
    pub kept: usize,
    pub bit_width: BitWidth,
}

impl CompressionConfig {
    pub fn validate(&self, m: usize) -> Result<(), CompressError> {
        if self.kept == 0 || self.kept > m {
            return Err(CompressError::KRange { k: self.kept, m });
        }
        Ok(())
    }
}

/// CLS-attention scores over patch tokens: a row softmax of the CLS-row
/// attention logits, with CLS itself excluded from the denominator (the
/// input only carries patch columns).
pub fn cls_scores(cls_patch_logits: &Tensor) -> Result<Tensor, CompressError> {
    if cls_patch_logits.rank() != 2 {
        return Err(CompressError::BadShape {
            what: "cls_scores",
            want: "[B x M]".into(),
            got: format!("{:?}", cls_patch_logits.shape()),
        });
    }
    if !cls_patch_logits.all_finite() {
        return Err(CompressError::NonFinite);
    }
    Ok(softmax_rows(cls_patch_logits))
}

/// Per-sample top-K patch indices by score. Ties prefer the smaller index;
/// each sample's output is sorted ascending. Indices are 1-based patch
/// positions (patch i sits at token position i, after CLS at 0). Returned
/// flat, row-major [B x K].
pub fn top_k_select(scores: &Tensor, k: usize) -> Result<Vec<u16>, CompressError> {
    let (bsz, m) = (scores.shape()[0], scores.shape()[1]);
    if k == 0 || k > m {
        return Err(CompressError::KRange { k, m });
    }
    if !scores.all_finite() {
        return Err(CompressError::NonFinite);
    }
    let mut out = Vec::with_capacity(bsz * k);
    for b in 0..bsz {
        let row = &scores.data()[b * m..(b + 1) * m];
        let mut idx: Vec<usize> = (1..=m).collect();
        // Descending score; equal scores resolve to the smaller index.
        idx.sort_by(|&i, &j| {
            row[j - 1]
                .partial_cmp(&row[i - 1])
                .expect("scores validated finite")
                .then(i.cmp(&j))
        });
        let mut sel: Vec<usize> = idx[..k].to_vec();
        sel.sort_unstable();
        out.extend(sel.iter().map(|&i| i as u16));
    }
    Ok(out)
}

/// Refined activation sequence plus everything the gradient path and the
/// receiver need to undo the mapping.
#[derive(Debug, Clone, PartialEq)]
pub struct RefinedActivations {
    /// [B x (K+2) x D]: CLS, the K selected patch tokens in ascending
    /// original order, then the merged token (zero when absent).
    pub tokens: Tensor,
    /// Flat [B x K] 1-based original patch indices, ascending per sample.
    pub indices: Vec<u16>,
    /// [B x M] merge weights: score mass of each *discarded* patch
    /// normalized over the discarded set; zero at selected positions.
    pub merge_weights: Tensor,
    /// False iff K = M (no tokens discarded). The merged slot is always
    /// emitted for shape stability but carries zeros when absent.
    pub merged_present: bool,
}

/// Build the refined sequence [CLS, selected..., merged] from boundary
/// activations [B x (M+1) x D] and CLS scores [B x M].
///
/// Merge weights are the discarded tokens' scores renormalized over the
/// discarded set. If that mass underflows to zero the weights fall back to
/// uniform over the discarded set (deterministic, documented here).
pub fn refine(acts: &Tensor, scores: &Tensor, k: usize) -> Result<RefinedActivations, CompressError> {
    if acts.rank() != 3 {
        return Err(CompressError::BadShape {
            what: "refine activations",
            want: "[B x (M+1) x D]".into(),
            got: format!("{:?}", acts.shape()),
        });
    }
    let (bsz, m1, d) = (acts.shape()[0], acts.shape()[1], acts.shape()[2]);
    let m = m1 - 1;
    if scores.shape() != [bsz, m] {
        return Err(CompressError::BadShape {
            what: "refine scores",
            want: format!("[{bsz} x {m}]"),
            got: format!("{:?}", scores.shape()),
        });
    }
    let indices = top_k_select(scores, k)?;
    let merged_present = k < m;
    let mut tokens = Tensor::zeros(&[bsz, k + 2, d]);
    let mut weights = Tensor::zeros(&[bsz, m]);
    for b in 0..bsz {
        for j in 0..d {
            let val = acts.at(&[b, 0, j]);
            tokens.set(&[b, 0, j], val);
        }
        let sel = &indices[b * k..(b + 1) * k];
        for (slot, &idx) in sel.iter().enumerate() {
            for j in 0..d {
                let val = acts.at(&[b, idx as usize, j]);
                tokens.set(&[b, 1 + slot, j], val);
            }
        }
        if merged_present {
            let mut selected = vec![false; m + 1];
            for &idx in sel {
                selected[idx as usize] = true;
            }
            let mut denom = 0.0;
            for i in 1..=m {
                if !selected[i] {
                    denom += scores.at(&[b, i - 1]);
                }
            }
            let uniform = 1.0 / (m - k) as f64;
            for i in 1..=m {
                if !selected[i] {
                    let w = if denom > 0.0 {
                        scores.at(&[b, i - 1]) / denom
                    } else {
                        uniform
                    };
                    weights.set(&[b, i - 1], w);
                    for j in 0..d {
                        let acc = tokens.at(&[b, k + 1, j]) + w * acts.at(&[b, i, j]);
                        tokens.set(&[b, k + 1, j], acc);
                    }
                }
            }
        }
    }
    Ok(RefinedActivations {
        tokens,
        indices,
        merge_weights: weights,
        merged_present,
    })
}

/// Expand a refined sequence back to [B x (M+1) x D]: selected tokens return
/// to their original positions and every discarded position receives a copy
/// of the merged token.
pub fn reconstruct(refined: &RefinedActivations, m: usize) -> Result<Tensor, CompressError> {
    let (bsz, k2, d) = (
        refined.tokens.shape()[0],
        refined.tokens.shape()[1],
        refined.tokens.shape()[2],
    );
    let k = k2 - 2;
    let mut out = Tensor::zeros(&[bsz, m + 1, d]);
    for b in 0..bsz {
        for j in 0..d {
            let val = refined.tokens.at(&[b, 0, j]);
            out.set(&[b, 0, j], val);
        }
        let mut selected = vec![false; m + 1];
        for (slot, &idx) in refined.indices[b * k..(b + 1) * k].iter().enumerate() {
            let idx = idx as usize;
            if idx == 0 || idx > m {
                return Err(CompressError::IndexRange { idx, m });
            }
            selected[idx] = true;
            for j in 0..d {
                let val = refined.tokens.at(&[b, 1 + slot, j]);
                out.set(&[b, idx, j], val);
            }
        }
        if refined.merged_present {
            for i in 1..=m {
                if !selected[i] {
                    for j in 0..d {
                        let val = refined.tokens.at(&[b, k + 1, j]);
                        out.set(&[b, i, j], val);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Quantized activations: packed level codes, a sign bitmap, and the f32
/// range anchors that define the grid. The grid is anchored at the f32
/// values (a_min rounded down, a_max rounded up) so that decoding from the
/// wire reproduces the quantizer's grid bit-for-bit and every entry stays
/// inside [a_min, a_max].
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedActivations {
    /// Level codes, q bits each, packed LSB-first in row-major entry order.
    pub codes: Vec<u8>,
    /// Sign bitmap, one bit per entry (1 = negative), LSB-first.
    pub signs: Vec<u8>,
    /// Smallest absolute entry, rounded down to f32.
    pub a_min: f32,
    /// Largest absolute entry, rounded up to f32.
    pub a_max: f32,
    pub bit_width: BitWidth,
    /// Batch size B.
    pub b: usize,
    /// Kept tokens K (the tensor carries K + 2 tokens).
    pub k: usize,
    /// Embedding width D.
    pub d: usize,
}

/// Total scalar entries in a [B x (K+2) x D] message.
pub fn entry_count(b: usize, k: usize, d: usize) -> usize {
    b * (k + 2) * d
}

/// Packed byte length for `n` entries of `q` bits.
pub fn packed_len(n: usize, q: u32) -> usize {
    (n * q as usize).div_ceil(8)
}

fn pack_bits(values: &[u64], q: u32) -> Vec<u8> {
    let mut buf = vec![0u8; packed_len(values.len(), q)];
    for (j, &v) in values.iter().enumerate() {
        let base = j * q as usize;
        for t in 0..q as usize {
            if (v >> t) & 1 == 1 {
                buf[(base + t) / 8] |= 1 << ((base + t) % 8);
            }
        }
    }
    buf
}

fn unpack_bits(buf: &[u8], q: u32, n: usize) -> Vec<u64> {
    let mut out = Vec::with_capacity(n);
    for j in 0..n {
        let base = j * q as usize;
        let mut v = 0u64;
        for t in 0..q as usize {
            if (buf[(base + t) / 8] >> ((base + t) % 8)) & 1 == 1 {
                v |= 1 << t;
            }
        }
        out.push(v);
    }
    out
}

/// Stochastically quantize a refined token tensor [B x (K+2) x D].
///
/// The grid has 2^q - 1 uniform intervals between the f32-rounded absolute
/// range of the whole message. An absolute value inside interval
/// [lo, hi] maps to lo with probability (hi - |x|) / (hi - lo), else to hi —
/// unbiased by construction, deterministic for on-grid values. Exactly one
/// uniform draw is consumed per entry regardless of the branch taken, so
/// stream positions depend only on the tensor shape. A degenerate range
/// (a_max = a_min) emits all-zero codes.
pub fn quantize(tokens: &Tensor, q: BitWidth, rng: &mut Rng) -> Result<QuantizedActivations, CompressError> {
    if tokens.rank() != 3 || tokens.shape()[1] < 2 {
        return Err(CompressError::BadShape {
            what: "quantize",
            want: "[B x (K+2) x D], K >= 0".into(),
            got: format!("{:?}", tokens.shape()),
        });
    }
    if !tokens.all_finite() {
        return Err(CompressError::NonFinite);
    }
    let (b, k2, d) = (tokens.shape()[0], tokens.shape()[1], tokens.shape()[2]);
    let n = b * k2 * d;
    let mut lo = f64::INFINITY;
    let mut hi = 0.0f64;
    for &x in tokens.data() {
        let a = x.abs();
        lo = lo.min(a);
        hi = hi.max(a);
    }
    // Round the anchors outward onto f32 so the f64 range is fully covered
    // and the wire header reproduces the grid exactly.
    let mut a_min = lo as f32;
    if a_min as f64 > lo {
        a_min = a_min.next_down();
    }
    let mut a_max = hi as f32;
    if (a_max as f64) < hi {
        a_max = a_max.next_up();
    }
    if !a_max.is_finite() {
        return Err(CompressError::Corrupt(format!(
            "absolute value {hi} exceeds f32 range"
        )));
    }
    let lo64 = a_min as f64;
    let hi64 = a_max as f64;
    let intervals = q.intervals();
    let step = (hi64 - lo64) / intervals as f64;
    let mut codes = Vec::with_capacity(n);
    let mut signs = vec![0u8; n.div_ceil(8)];
    for (j, &x) in tokens.data().iter().enumerate() {
        if x < 0.0 {
            signs[j / 8] |= 1 << (j % 8);
        }
        let u = rng.uniform();
        let code = if step == 0.0 {
            0
        } else {
            let a = x.abs();
            let mut cell = ((a - lo64) / step).floor() as i64;
            cell = cell.clamp(0, intervals as i64 - 1);
            let cell = cell as u64;
            let lo_level = lo64 + cell as f64 * step;
            let hi_level = lo64 + (cell + 1) as f64 * step;
            let keep_lo = ((hi_level - a) / (hi_level - lo_level)).clamp(0.0, 1.0);
            if u < keep_lo {
                cell
            } else {
                cell + 1
            }
        };
        codes.push(code);
    }
    Ok(QuantizedActivations {
        codes: pack_bits(&codes, q.bits()),
        signs,
        a_min,
        a_max,
        bit_width: q,
        b,
        k: k2 - 2,
        d,
    })
}

impl QuantizedActivations {
    /// Structural validation: section lengths, zeroed trailing bits, sane
    /// range anchors. Used both locally and after decoding from the wire.
    pub fn validate(&self) -> Result<(), CompressError> {
        let n = entry_count(self.b, self.k, self.d);
        let q = self.bit_width.bits();
        if self.codes.len() != packed_len(n, q) {
            return Err(CompressError::Corrupt(format!(
                "codes section is {} bytes, expected {}",
                self.codes.len(),
                packed_len(n, q)
            )));
        }
        if self.signs.len() != n.div_ceil(8) {
            return Err(CompressError::Corrupt(format!(
                "signs section is {} bytes, expected {}",
                self.signs.len(),
                n.div_ceil(8)
            )));
        }
        // Trailing pad bits must be zero (canonical encoding).
        let used_bits = n * q as usize;
        if !used_bits.is_multiple_of(8) {
            let last = self.codes[self.codes.len() - 1];
            if last >> (used_bits % 8) != 0 {
                return Err(CompressError::Corrupt("nonzero code pad bits".into()));
            }
        }
        if !n.is_multiple_of(8) && !self.signs.is_empty() {
            let last = self.signs[self.signs.len() - 1];
            if last >> (n % 8) != 0 {
                return Err(CompressError::Corrupt("nonzero sign pad bits".into()));
            }
        }
        if !(self.a_min.is_finite() && self.a_max.is_finite()) || self.a_min < 0.0 {
            return Err(CompressError::Corrupt("range anchors not finite/nonneg".into()));
        }
        if self.a_min > self.a_max {
            return Err(CompressError::Corrupt(format!(
                "a_min {} exceeds a_max {}",
                self.a_min, self.a_max
            )));
        }
        Ok(())
    }

    /// Unpacked codes, one per entry.
    pub fn unpacked_codes(&self) -> Vec<u64> {
        unpack_bits(
            &self.codes,
            self.bit_width.bits(),
            entry_count(self.b, self.k, self.d),
        )
    }
}

/// Reconstruct values from quantized form: sign · (a_min + code · step) in
/// f64. A degenerate grid (a_max = a_min) yields sign · a_min for all
/// entries. Fails on corrupt section lengths or a batch of zero.
pub fn dequantize(qa: &QuantizedActivations) -> Result<Tensor, CompressError> {
    if qa.b == 0 || qa.d == 0 {
        return Err(CompressError::Corrupt(
            "empty message has no tensor form".into(),
        ));
    }
    qa.validate()?;
    let n = entry_count(qa.b, qa.k, qa.d);
    let lo = qa.a_min as f64;
    let step = (qa.a_max as f64 - lo) / qa.bit_width.intervals() as f64;
    let codes = qa.unpacked_codes();
    let mut data = Vec::with_capacity(n);
    for (j, &c) in codes.iter().enumerate() {
        let mag = lo + c as f64 * step;
        let neg = (qa.signs[j / 8] >> (j % 8)) & 1 == 1;
        data.push(if neg { -mag } else { mag });
    }
    Ok(Tensor::new(&[qa.b, qa.k + 2, qa.d], data).expect("validated dims"))
}

/// Exact adjoint of the frozen-coefficient refine map, routing a gradient on
/// the refined sequence [B x (K+2) x D] back to the full boundary layout
/// [B x (M+1) x D]: CLS passes through, selected tokens return to their
/// positions, and each discarded position receives its merge weight times
/// the merged token's gradient. When no merged token was present that slot's
/// gradient is discarded. The quantizer contributes identity (straight
/// through).
pub fn grad_scatter(
    dtokens: &Tensor,
    refined: &RefinedActivations,
    m: usize,
) -> Result<Tensor, CompressError> {
    if dtokens.shape() != refined.tokens.shape() {
        return Err(CompressError::BadShape {
            what: "grad_scatter",
            want: format!("{:?}", refined.tokens.shape()),
            got: format!("{:?}", dtokens.shape()),
        });
    }
    let (bsz, k2, d) = (dtokens.shape()[0], dtokens.shape()[1], dtokens.shape()[2]);
    let k = k2 - 2;
    let mut out = Tensor::zeros(&[bsz, m + 1, d]);
    for b in 0..bsz {
        for j in 0..d {
            let val = dtokens.at(&[b, 0, j]);
            out.set(&[b, 0, j], val);
        }
        for (slot, &idx) in refined.indices[b * k..(b + 1) * k].iter().enumerate() {
            let idx = idx as usize;
            if idx == 0 || idx > m {
                return Err(CompressError::IndexRange { idx, m });
            }
            for j in 0..d {
                let val = dtokens.at(&[b, 1 + slot, j]);
                out.set(&[b, idx, j], val);
            }
        }
        if refined.merged_present {
            for i in 1..=m {
                let w = refined.merge_weights.at(&[b, i - 1]);
                if w != 0.0 {
                    for j in 0..d {
                        let val = w * dtokens.at(&[b, k + 1, j]);
                        out.set(&[b, i, j], val);
                    }
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tensor3(b: usize, t: usize, d: usize, vals: &[f64]) -> Tensor {
        Tensor::new(&[b, t, d], vals.to_vec()).unwrap()
    }

    #[test]
    fn cls_scores_two_patch_hand_value() {
        let logits = Tensor::new(&[1, 2], vec![2.0f64.ln(), 0.0]).unwrap();
        let s = cls_scores(&logits).unwrap();
        assert!((s.data()[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((s.data()[1] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn top_k_orders_and_breaks_ties_low() {
        let scores = Tensor::new(&[1, 4], vec![0.1, 0.4, 0.4, 0.1]).unwrap();
        assert_eq!(top_k_select(&scores, 2).unwrap(), vec![2, 3]);
        // Third pick ties between patches 1 and 4; smaller index wins.
        assert_eq!(top_k_select(&scores, 3).unwrap(), vec![1, 2, 3]);
        assert!(top_k_select(&scores, 0).is_err());
        assert!(top_k_select(&scores, 5).is_err());
    }

    #[test]
    fn refine_single_discarded_is_that_token() {
        // M = 2, K = 1: the one discarded token becomes the merged token.
        let acts = tensor3(1, 3, 2, &[9.0, 9.0, 1.0, 2.0, 3.0, 4.0]);
        let scores = Tensor::new(&[1, 2], vec![0.8, 0.2]).unwrap();
        let r = refine(&acts, &scores, 1).unwrap();
        assert!(r.merged_present);
        assert_eq!(r.indices, vec![1]);
        // Merged slot equals patch 2 exactly.
        assert_eq!(r.tokens.at(&[0, 2, 0]), 3.0);
        assert_eq!(r.tokens.at(&[0, 2, 1]), 4.0);
        assert_eq!(r.merge_weights.at(&[0, 1]), 1.0);
    }

    #[test]
    fn refine_weighted_merge_hand_value() {
        // Discarded tokens [1,0] and [0,1] with renormalized weights
        // 0.25 / 0.75 merge to [0.25, 0.75].
        let acts = tensor3(
            1,
            4,
            2,
            &[9.0, 9.0, 5.0, 5.0, 1.0, 0.0, 0.0, 1.0],
        );
        let scores = Tensor::new(&[1, 3], vec![0.5, 0.125, 0.375]).unwrap();
        let r = refine(&acts, &scores, 1).unwrap();
        assert_eq!(r.indices, vec![1]);
        assert!((r.tokens.at(&[0, 2, 0]) - 0.25).abs() < 1e-12);
        assert!((r.tokens.at(&[0, 2, 1]) - 0.75).abs() < 1e-12);
        assert!((r.merge_weights.at(&[0, 1]) - 0.25).abs() < 1e-12);
        assert!((r.merge_weights.at(&[0, 2]) - 0.75).abs() < 1e-12);
    }

    #[test]
    fn refine_identity_when_all_kept() {
        let acts = tensor3(1, 3, 1, &[7.0, 1.0, 2.0]);
        let scores = Tensor::new(&[1, 2], vec![0.3, 0.7]).unwrap();
        let r = refine(&acts, &scores, 2).unwrap();
        assert!(!r.merged_present);
        assert_eq!(r.indices, vec![1, 2]);
        assert_eq!(r.tokens.data(), &[7.0, 1.0, 2.0, 0.0]);
        assert_eq!(r.merge_weights.data(), &[0.0, 0.0]);
    }

    #[test]
    fn refine_underflowed_mass_falls_back_to_uniform() {
        let acts = tensor3(1, 4, 1, &[9.0, 1.0, 2.0, 4.0]);
        let scores = Tensor::new(&[1, 3], vec![1.0, 0.0, 0.0]).unwrap();
        let r = refine(&acts, &scores, 1).unwrap();
        assert_eq!(r.indices, vec![1]);
        assert!((r.merge_weights.at(&[0, 1]) - 0.5).abs() < 1e-12);
        assert!((r.merge_weights.at(&[0, 2]) - 0.5).abs() < 1e-12);
        assert!((r.tokens.at(&[0, 2, 0]) - 3.0).abs() < 1e-12);
    }

    #[test]
    fn reconstruct_places_merged_in_every_discarded_slot() {
        let acts = tensor3(1, 4, 1, &[9.0, 1.0, 2.0, 4.0]);
        let scores = Tensor::new(&[1, 3], vec![0.2, 0.5, 0.3]).unwrap();
        let r = refine(&acts, &scores, 1).unwrap();
        assert_eq!(r.indices, vec![2]);
        let rec = reconstruct(&r, 3).unwrap();
        assert_eq!(rec.at(&[0, 0, 0]), 9.0);
        assert_eq!(rec.at(&[0, 2, 0]), 2.0);
        // Positions 1 and 3 both hold the merged token.
        let merged = r.tokens.at(&[0, 2, 0]);
        assert_eq!(rec.at(&[0, 1, 0]), merged);
        assert_eq!(rec.at(&[0, 3, 0]), merged);
    }

    #[test]
    fn distortion_bound_holds_on_hand_case() {
        // Lemma-style bound: ||A - reconstruct(refine(A))||_F^2 <= 4 Psi (M-K) B.
        let acts = tensor3(1, 4, 2, &[1.0, 2.0, -3.0, 0.5, 2.0, 2.0, 0.1, -0.2]);
        let scores = Tensor::new(&[1, 3], vec![0.6, 0.3, 0.1]).unwrap();
        let r = refine(&acts, &scores, 1).unwrap();
        let rec = reconstruct(&r, 3).unwrap();
        let mut diff = acts.clone();
        diff.add_scaled(&rec, -1.0).unwrap();
        let mut psi = 0.0f64;
        for i in 0..4 {
            let mut nrm = 0.0;
            for j in 0..2 {
                nrm += acts.at(&[0, i, j]).powi(2);
            }
            psi = psi.max(nrm);
        }
        assert!(diff.frob_sq() <= 4.0 * psi * 2.0 * 1.0 + 1e-12);
    }

    #[test]
    fn realized_distortion_is_not_monotone_in_k() {
        // The distortion *bound* 4 Psi (M-K) B falls as K grows, but the
        // realized distortion need not: promoting a low-norm, high-score
        // token out of the merge pool re-aims the merged token at a far-away
        // survivor. This pins a hand-checked counterexample so nobody "fixes"
        // a monotonicity that does not exist.
        //
        // M = 4, D = 1. Patch values (0, 0, 1, 0), scores (2, 0.50, 0.49,
        // 0.01). K=1 keeps patch 1; merged over {2,3,4} = 0.49, distortion
        // = 0.49^2 + 0.51^2 + 0.49^2 = 0.7403. K=2 also keeps patch 2; merged
        // over {3,4} = 0.98, distortion = 0.02^2 + 0.98^2 = 0.9608 — larger.
        let acts = tensor3(1, 5, 1, &[9.0, 0.0, 0.0, 1.0, 0.0]);
        let scores = Tensor::new(&[1, 4], vec![2.0, 0.50, 0.49, 0.01]).unwrap();
        let distortion = |k: usize| {
            let r = refine(&acts, &scores, k).unwrap();
            let rec = reconstruct(&r, 4).unwrap();
            let mut diff = acts.clone();
            diff.add_scaled(&rec, -1.0).unwrap();
            diff.frob_sq()
        };
        let d1 = distortion(1);
        let d2 = distortion(2);
        assert!((d1 - 0.7403).abs() < 1e-12, "K=1 distortion {d1}");
        assert!((d2 - 0.9608).abs() < 1e-12, "K=2 distortion {d2}");
        assert!(d2 > d1, "counterexample must show an increase");
    }

    #[test]
    fn quantize_exact_on_degenerate_and_on_grid() {
        let mut rng = Rng::new(0);
        // All-equal magnitudes: range collapses, codes all zero, exact.
        let t = tensor3(1, 2, 3, &[0.5, -0.5, 0.5, 0.5, -0.5, 0.5]);
        let qa = quantize(&t, BitWidth::Q4, &mut rng).unwrap();
        assert!(qa.unpacked_codes().iter().all(|&c| c == 0));
        assert_eq!(dequantize(&qa).unwrap().data(), t.data());
        // Values exactly on the grid round deterministically to themselves.
        let g = tensor3(1, 2, 2, &[0.0, 1.0, 2.0, 3.0]);
        let qg = quantize(&g, BitWidth::Q2, &mut rng).unwrap();
        assert_eq!(dequantize(&qg).unwrap().data(), g.data());
    }

    #[test]
    fn quantize_error_bounded_by_step() {
        let mut rng = Rng::new(42);
        let t = Tensor::from_fn(&[2, 5, 3], || rng.normal());
        for q in BitWidth::ALL {
            let mut qrng = Rng::new(7);
            let qa = quantize(&t, q, &mut qrng).unwrap();
            let back = dequantize(&qa).unwrap();
            let step = (qa.a_max as f64 - qa.a_min as f64) / q.intervals() as f64;
            let mut worst = 0.0f64;
            for (a, b) in t.data().iter().zip(back.data()) {
                worst = worst.max((a - b).abs());
            }
            assert!(worst <= step + 1e-15, "q={q:?}: err {worst} > step {step}");
        }
    }

    #[test]
    fn quantize_mean_is_unbiased_quick() {
        // Small-sample version of the full Monte Carlo acceptance probe.
        let t = tensor3(1, 3, 2, &[0.17, -0.42, 0.98, -0.05, 0.33, 0.71]);
        let n = 20_000;
        let mut sums = [0.0; 6];
        for i in 0..n {
            let mut rng = Rng::derive(1000, &[i]);
            let qa = quantize(&t, BitWidth::Q2, &mut rng).unwrap();
            for (s, v) in sums.iter_mut().zip(dequantize(&qa).unwrap().data()) {
                *s += v;
            }
        }
        for (s, x) in sums.iter().zip(t.data()) {
            let mean = s / n as f64;
            assert!((mean - x).abs() < 0.01, "mean {mean} vs {x}");
        }
    }

    #[test]
    fn quantizer_consumes_one_draw_per_entry() {
        let t = tensor3(1, 2, 3, &[0.5, -0.5, 0.5, 0.5, -0.5, 0.5]);
        let mut rng = Rng::new(31);
        quantize(&t, BitWidth::Q8, &mut rng).unwrap();
        let mut fresh = Rng::new(31);
        for _ in 0..6 {
            fresh.uniform();
        }
        assert_eq!(rng.next_u64(), fresh.next_u64());
    }

    #[test]
    fn grad_scatter_is_adjoint_on_hand_case() {
        // <refine(A), G> must equal <A, grad_scatter(G)> for fixed weights.
        let mut rng = Rng::new(8);
        let acts = Tensor::from_fn(&[2, 5, 3], || rng.normal());
        let logits = Tensor::from_fn(&[2, 4], || rng.normal());
        let scores = cls_scores(&logits).unwrap();
        let r = refine(&acts, &scores, 2).unwrap();
        let g = Tensor::from_fn(&[2, 4, 3], || rng.normal());
        let scattered = grad_scatter(&g, &r, 4).unwrap();
        let mut lhs = 0.0;
        for (a, b) in r.tokens.data().iter().zip(g.data()) {
            lhs += a * b;
        }
        let mut rhs = 0.0;
        for (a, b) in acts.data().iter().zip(scattered.data()) {
            rhs += a * b;
        }
        assert!((lhs - rhs).abs() < 1e-12, "{lhs} vs {rhs}");
    }

    #[test]
    fn dequantize_rejects_corrupt_sections() {
        let mut rng = Rng::new(1);
        let t = Tensor::from_fn(&[1, 3, 4], || rng.normal());
        let qa = quantize(&t, BitWidth::Q4, &mut rng).unwrap();
        let mut short = qa.clone();
        short.codes.pop();
        assert!(dequantize(&short).is_err());
        let mut bad_range = qa.clone();
        bad_range.a_min = bad_range.a_max + 1.0;
        assert!(dequantize(&bad_range).is_err());
        let mut bad_signs = qa;
        bad_signs.signs.push(0);
        assert!(dequantize(&bad_signs).is_err());
    }
}
