//! Dense row-major `f64` tensors.
//!
//! A [`Tensor`] is a plain value: a [`Shape`] and a flat buffer. Values that
//! take part in differentiation live inside a [`crate::graph::Graph`], which
//! owns their gradient slots.

use std::fmt;

use serde::{Deserialize, Serialize};

/// Errors raised by tensor construction and graph operations.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TensorError {
    #[error("buffer of length {got} does not fill shape {shape} ({expected} elements)")]
    LengthMismatch {
        shape: Shape,
        expected: usize,
        got: usize,
    },
    #[error("shape extents must be >= 1, got {0:?}")]
    ZeroExtent(Vec<usize>),
    #[error("{op}: incompatible shapes {lhs} and {rhs}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Shape,
        rhs: Shape,
    },
    #[error("{op}: axis {axis} out of range for rank {rank}")]
    AxisOutOfRange {
        op: &'static str,
        axis: usize,
        rank: usize,
    },
    #[error("{op}: expected rank {expected}, got shape {shape}")]
    RankMismatch {
        op: &'static str,
        expected: &'static str,
        shape: Shape,
    },
    #[error("backward requires a scalar loss, got shape {0}")]
    NonScalarLoss(Shape),
    #[error("value handle {0} is not attached to this graph")]
    Detached(usize),
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("{op}: index {index} out of range (limit {limit})")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        limit: usize,
    },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Ordered list of extents. Rank 0 is a scalar.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn new(dims: impl Into<Vec<usize>>) -> Result<Self> {
        let dims = dims.into();
        if dims.contains(&0) {
            return Err(TensorError::ZeroExtent(dims));
        }
        Ok(Shape(dims))
    }

    pub fn scalar() -> Self {
        Shape(Vec::new())
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1 && self.0.iter().all(|&d| d == 1)
    }
}

impl TryFrom<Vec<usize>> for Shape {
    type Error = TensorError;
    fn try_from(dims: Vec<usize>) -> Result<Self> {
        Shape::new(dims)
    }
}

impl From<Shape> for Vec<usize> {
    fn from(s: Shape) -> Self {
        s.0
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[")?;
        for (i, d) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{d}")?;
        }
        write!(f, "]")
    }
}

/// Initial contents for [`Tensor::build`].
#[derive(Debug, Clone)]
pub enum Fill {
    Scalar(f64),
    Buffer(Vec<f64>),
}

impl From<f64> for Fill {
    fn from(v: f64) -> Self {
        Fill::Scalar(v)
    }
}

impl From<Vec<f64>> for Fill {
    fn from(v: Vec<f64>) -> Self {
        Fill::Buffer(v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor {
    pub fn build(dims: impl Into<Vec<usize>>, fill: impl Into<Fill>) -> Result<Self> {
        let shape = Shape::new(dims)?;
        Self::with_shape(shape, fill)
    }

    pub fn with_shape(shape: Shape, fill: impl Into<Fill>) -> Result<Self> {
        let n = shape.numel();
        let data = match fill.into() {
            Fill::Scalar(v) => vec![v; n],
            Fill::Buffer(buf) => {
                if buf.len() != n {
                    return Err(TensorError::LengthMismatch {
                        expected: n,
                        got: buf.len(),
                        shape,
                    });
                }
                buf
            }
        };
        Ok(Tensor { shape, data })
    }

    pub fn zeros(dims: impl Into<Vec<usize>>) -> Result<Self> {
        Self::build(dims, 0.0)
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: Shape::scalar(),
            data: vec![v],
        }
    }

    /// Rank-1 tensor from a non-empty slice.
    pub fn vector(values: &[f64]) -> Result<Self> {
        Self::build(vec![values.len()], values.to_vec())
    }

    pub fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        Self::build(vec![rows, cols], values)
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.shape.dims()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.data
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_values(self) -> Vec<f64> {
        self.data
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Option<f64> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn reshape(&self, dims: impl Into<Vec<usize>>) -> Result<Tensor> {
        let shape = Shape::new(dims)?;
        if shape.numel() != self.data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape,
            });
        }
        Ok(Tensor {
            shape,
            data: self.data.clone(),
        })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn build_zero_fill() {
        let t = Tensor::build(vec![2, 2], 0.0).unwrap();
        assert_eq!(t.values(), &[0.0; 4]);
        assert_eq!(t.dims(), &[2, 2]);
    }

    #[test]
    fn build_from_buffer() {
        let t = Tensor::build(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(t.values(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn build_length_mismatch() {
        let err = Tensor::build(vec![2], vec![1.0, 2.0, 3.0]).unwrap_err();
        assert!(matches!(
            err,
            TensorError::LengthMismatch {
                expected: 2,
                got: 3,
                ..
            }
        ));
    }

    #[test]
    fn zero_extent_rejected() {
        assert!(Shape::new(vec![3, 0]).is_err());
        assert!(serde_json::from_str::<Shape>("[2,0]").is_err());
    }

    #[test]
    fn scalar_shape() {
        let s = Tensor::scalar(2.5);
        assert_eq!(s.shape().rank(), 0);
        assert_eq!(s.item(), Some(2.5));
        assert!(s.shape().is_scalar());
        assert!(Shape::new(vec![1, 1]).unwrap().is_scalar());
    }
}
