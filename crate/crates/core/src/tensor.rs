//! Flat row-major f64 tensor.
//!
//! Deliberately minimal: a shape plus a contiguous `Vec<f64>`. All kernels in
//! this crate index it manually with fixed loop orders so that summation order
//! — and therefore every last bit of the result — is reproducible.

use thiserror::Error;

/// Shape or value errors raised by tensor construction and kernels.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum ShapeError {
    #[error("data length {len} does not match shape {shape:?} (expects {expect})")]
    LengthMismatch {
        shape: Vec<usize>,
        len: usize,
        expect: usize,
    },
    #[error("shape {shape:?} has a zero dimension")]
    ZeroDim { shape: Vec<usize> },
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Incompatible {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
}

/// Dense row-major tensor of f64 values. Dimensions are positive.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Tensor from explicit data; the length must equal the shape product.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self, ShapeError> {
        if shape.contains(&0) {
            return Err(ShapeError::ZeroDim {
                shape: shape.to_vec(),
            });
        }
        let expect: usize = shape.iter().product();
        if data.len() != expect {
            return Err(ShapeError::LengthMismatch {
                shape: shape.to_vec(),
                len: data.len(),
                expect,
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    /// All-zero tensor.
    pub fn zeros(shape: &[usize]) -> Self {
        assert!(
            shape.iter().all(|&d| d > 0),
            "zeros: zero dimension in {shape:?}"
        );
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    /// Tensor filled from a generator applied in row-major order.
    pub fn from_fn(shape: &[usize], mut f: impl FnMut() -> f64) -> Self {
        let mut t = Tensor::zeros(shape);
        for x in &mut t.data {
            *x = f();
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Row-major flat offset of a multi-index (debug-checked).
    pub fn offset(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.shape.len());
        let mut off = 0;
        for (k, &i) in idx.iter().enumerate() {
            debug_assert!(i < self.shape[k], "index {idx:?} out of {:?}", self.shape);
            off = off * self.shape[k] + i;
        }
        off
    }

    pub fn at(&self, idx: &[usize]) -> f64 {
        self.data[self.offset(idx)]
    }

    pub fn set(&mut self, idx: &[usize], v: f64) {
        let off = self.offset(idx);
        self.data[off] = v;
    }

    /// Reinterpret with a new shape of identical element count.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Tensor, ShapeError> {
        Tensor::new(shape, self.data.clone())
    }

    /// self += scale * other, elementwise.
    pub fn add_scaled(&mut self, other: &Tensor, scale: f64) -> Result<(), ShapeError> {
        if self.shape != other.shape {
            return Err(ShapeError::Incompatible {
                op: "add_scaled",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
        Ok(())
    }

    /// Multiply every element by `s`.
    pub fn scale(&mut self, s: f64) {
        for x in &mut self.data {
            *x *= s;
        }
    }

    /// Squared Frobenius norm (sum of squares, fixed order).
    pub fn frob_sq(&self) -> f64 {
        let mut s = 0.0;
        for &x in &self.data {
            s += x * x;
        }
        s
    }

    /// Largest absolute difference against another tensor of the same shape.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        let mut m = 0.0f64;
        for (a, b) in self.data.iter().zip(&other.data) {
            m = m.max((a - b).abs());
        }
        m
    }

    /// True when every element is finite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn construction_checks_length_and_dims() {
        assert!(Tensor::new(&[2, 3], vec![0.0; 6]).is_ok());
        assert_eq!(
            Tensor::new(&[2, 3], vec![0.0; 5]).unwrap_err(),
            ShapeError::LengthMismatch {
                shape: vec![2, 3],
                len: 5,
                expect: 6
            }
        );
        assert!(matches!(
            Tensor::new(&[2, 0], vec![]).unwrap_err(),
            ShapeError::ZeroDim { .. }
        ));
    }

    #[test]
    fn offsets_are_row_major() {
        let t = Tensor::new(&[2, 3, 4], (0..24).map(|i| i as f64).collect()).unwrap();
        assert_eq!(t.at(&[0, 0, 0]), 0.0);
        assert_eq!(t.at(&[0, 1, 0]), 4.0);
        assert_eq!(t.at(&[1, 0, 0]), 12.0);
        assert_eq!(t.at(&[1, 2, 3]), 23.0);
    }

    #[test]
    fn add_scaled_and_frob() {
        let mut a = Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::new(&[2, 2], vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        a.add_scaled(&b, 0.5).unwrap();
        assert_eq!(a.data(), &[1.5, 2.5, 3.5, 4.5]);
        assert_eq!(b.frob_sq(), 4.0);
        let c = Tensor::zeros(&[3, 2]);
        assert!(a.add_scaled(&c, 1.0).is_err());
    }
}
