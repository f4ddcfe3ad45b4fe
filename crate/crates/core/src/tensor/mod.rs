//! Dense rank-4 `f64` tensors and the reverse-mode tape that differentiates them.
//!
//! Index order is batch → channel → height → width, row-major. Rank-2 values
//! (logits, linear weights) use shape `(rows, cols, 1, 1)`; rank-1 values use
//! `(len, 1, 1, 1)`.

mod checkpoint;
mod tape;

pub use checkpoint::{read_checkpoint, write_checkpoint, NamedTensor, CHECKPOINT_MAGIC};
pub use tape::{Gradients, Tape, Var};

use thiserror::Error;

pub type Shape = [usize; 4];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("element count of shape {0:?} overflows usize")]
    SizeOverflow(Shape),
    #[error("data length {len} does not match shape {shape:?}")]
    LengthMismatch { shape: Shape, len: usize },
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Shape,
        rhs: Shape,
    },
    #[error("invalid shape for {op}: {detail}")]
    InvalidShape { op: &'static str, detail: String },
    #[error("loss must have shape [1, 1, 1, 1], got {0:?}")]
    NonScalarLoss(Shape),
    #[error("backward called on a tape with no recorded forward pass")]
    TapeConsumed,
    #[error("variable {0} does not belong to this tape")]
    UnknownVar(usize),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

pub(crate) fn numel(shape: Shape) -> Result<usize> {
    shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or(TensorError::SizeOverflow(shape))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    data: Vec<f64>,
    shape: Shape,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor4 {
    pub fn zeros(shape: Shape) -> Result<Self> {
        let n = numel(shape)?;
        Ok(Self {
            data: vec![0.0; n],
            shape,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn from_vec(shape: Shape, data: Vec<f64>) -> Result<Self> {
        let n = numel(shape)?;
        if n != data.len() {
            return Err(TensorError::LengthMismatch {
                shape,
                len: data.len(),
            });
        }
        Ok(Self {
            data,
            shape,
            requires_grad: false,
            grad: None,
        })
    }

    /// Rank-1 tensor stored as `(len, 1, 1, 1)`.
    pub fn vector(data: Vec<f64>) -> Self {
        let shape = [data.len(), 1, 1, 1];
        Self {
            data,
            shape,
            requires_grad: false,
            grad: None,
        }
    }

    /// Rank-2 tensor stored as `(rows, cols, 1, 1)`.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::from_vec([rows, cols, 1, 1], data)
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            data: vec![value],
            shape: [1, 1, 1, 1],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Option<Vec<f64>>) -> Result<()> {
        if let Some(g) = &grad {
            if g.len() != self.data.len() {
                return Err(TensorError::LengthMismatch {
                    shape: self.shape,
                    len: g.len(),
                });
            }
        }
        self.grad = grad;
        Ok(())
    }

    pub fn take_grad(&mut self) -> Option<Vec<f64>> {
        self.grad.take()
    }

    #[inline]
    pub fn offset(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        let [_, cs, hs, ws] = self.shape;
        ((n * cs + c) * hs + h) * ws + w
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> f64 {
        self.data[self.offset(n, c, h, w)]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Batch items `[start, end)` as a new tensor.
    pub fn slice_batch(&self, start: usize, end: usize) -> Result<Self> {
        let [n, c, h, w] = self.shape;
        if start > end || end > n {
            return Err(TensorError::InvalidShape {
                op: "slice_batch",
                detail: format!("range {start}..{end} outside batch of {n}"),
            });
        }
        let item = c * h * w;
        Self::from_vec(
            [end - start, c, h, w],
            self.data[start * item..end * item].to_vec(),
        )
    }

    /// Gathers the listed batch items, in order.
    pub fn gather_batch(&self, indices: &[usize]) -> Result<Self> {
        let [n, c, h, w] = self.shape;
        let item = c * h * w;
        let mut data = Vec::with_capacity(indices.len() * item);
        for &i in indices {
            if i >= n {
                return Err(TensorError::InvalidShape {
                    op: "gather_batch",
                    detail: format!("index {i} outside batch of {n}"),
                });
            }
            data.extend_from_slice(&self.data[i * item..(i + 1) * item]);
        }
        Self::from_vec([indices.len(), c, h, w], data)
    }

    pub fn check_same_shape(&self, other: &Tensor4, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.shape,
                rhs: other.shape,
            });
        }
        Ok(())
    }

    /// Elementwise maximum; ties resolve to `self`.
    pub fn maximum(&self, other: &Tensor4) -> Result<Tensor4> {
        self.check_same_shape(other, "max")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| if b > a { b } else { a })
            .collect();
        Tensor4::from_vec(self.shape, data)
    }

    pub fn add(&self, other: &Tensor4) -> Result<Tensor4> {
        self.check_same_shape(other, "add")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a + b)
            .collect();
        Tensor4::from_vec(self.shape, data)
    }

    pub fn scale(&self, factor: f64) -> Tensor4 {
        Tensor4 {
            data: self.data.iter().map(|&a| a * factor).collect(),
            shape: self.shape,
            requires_grad: false,
            grad: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zeros_shapes() {
        let t = Tensor4::zeros([1, 1, 2, 2]).unwrap();
        assert_eq!(t.data(), &[0.0; 4]);
        assert!(!t.requires_grad());

        let empty = Tensor4::zeros([0, 3, 4, 4]).unwrap();
        assert!(empty.is_empty());
        assert_eq!(empty.shape(), [0, 3, 4, 4]);

        assert_eq!(Tensor4::zeros([1, 2, 3, 3]).unwrap().len(), 18);
    }

    #[test]
    fn zeros_overflow_is_size_error() {
        let err = Tensor4::zeros([usize::MAX, 2, 1, 1]).unwrap_err();
        assert!(matches!(err, TensorError::SizeOverflow(_)));
    }

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor4::from_vec([1, 1, 2, 2], vec![1.0; 3]).is_err());
    }

    #[test]
    fn elementwise_examples() {
        let a = Tensor4::vector(vec![1.0, 5.0]);
        let b = Tensor4::vector(vec![3.0, 2.0]);
        assert_eq!(a.maximum(&b).unwrap().data(), &[3.0, 5.0]);

        let z = Tensor4::vector(vec![0.0, 0.0]);
        let x = Tensor4::vector(vec![1.0, 2.0]);
        assert_eq!(x.add(&z).unwrap().data(), &[1.0, 2.0]);

        assert_eq!(
            Tensor4::vector(vec![2.0, 4.0]).scale(0.5).data(),
            &[1.0, 2.0]
        );
    }

    #[test]
    fn binary_ops_never_broadcast() {
        let a = Tensor4::vector(vec![1.0, 2.0]);
        let b = Tensor4::vector(vec![1.0]);
        assert!(matches!(a.add(&b), Err(TensorError::ShapeMismatch { .. })));
        assert!(a.maximum(&b).is_err());
    }

    #[test]
    fn grad_must_match_shape() {
        let mut t = Tensor4::vector(vec![1.0, 2.0]);
        assert!(t.set_grad(Some(vec![0.0])).is_err());
        t.set_grad(Some(vec![0.5, 0.5])).unwrap();
        assert_eq!(t.grad(), Some(&[0.5, 0.5][..]));
    }
}
