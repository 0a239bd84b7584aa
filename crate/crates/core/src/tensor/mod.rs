//! Dense fp64 tensors and a recorded-graph (tape) reverse-mode autodiff engine.
//!
//! Everything the model and the adapters compute runs through [`Graph`] /
//! [`Var`]. Tensors are plain row-major value types; a `Var` is a handle into
//! the tape of one graph. Broadcasting is deliberately restricted: operand
//! ranks must match and a dimension may only differ when one side has size 1.

mod graph;
pub mod check;

pub use graph::{insert_mapping, Graph, Var};

use thiserror::Error;

/// Errors raised by tensor construction and graph operations.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("shape {shape:?} implies {expected} elements, got {got}")]
    ShapeData {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },
    #[error("{op}: position {pos} out of range for length {len}")]
    PositionOutOfRange {
        op: &'static str,
        pos: usize,
        len: usize,
    },
    #[error("{op}: positions must be strictly increasing")]
    PositionsNotIncreasing { op: &'static str },
    #[error("backward requires a scalar, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("cross entropy needs at least 2 classes, got {classes}")]
    TooFewClasses { classes: usize },
    #[error("causal conv1d kernel width must be >= 1")]
    EmptyKernel,
    #[error("{op}: slice {start}..{} out of range for size {size}", start + len)]
    SliceOutOfRange {
        op: &'static str,
        start: usize,
        len: usize,
        size: usize,
    },
    #[error("operands belong to different graphs")]
    GraphMismatch,
    #[error("singular matrix in {op}")]
    Singular { op: &'static str },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Dense row-major fp64 tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::ShapeData {
                shape,
                expected,
                got: data.len(),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    /// Uniform values in `[lo, hi)` drawn in row-major order.
    pub fn rand_uniform<R: rand::Rng>(shape: Vec<usize>, lo: f64, hi: f64, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn as_scalar(&self) -> Result<f64> {
        if self.is_scalar() {
            Ok(self.data[0])
        } else {
            Err(TensorError::NonScalarLoss {
                shape: self.shape.clone(),
            })
        }
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Elements per axis-0 row (product of trailing dims).
    pub fn row_size(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    pub fn get2(&self, r: usize, c: usize) -> f64 {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[r * self.shape[1] + c]
    }

    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Tensor> {
        Tensor::new(shape, self.data.clone())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// True when both tensors have the same shape and exactly equal values
    /// (no tolerance; -0.0 == 0.0 as usual for f64).
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a == b)
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Numerically stable softplus: `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Numerically stable logistic sigmoid.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

/// Inverse of softplus, for initializing a bias whose softplus is a target rate.
pub fn softplus_inverse(y: f64) -> f64 {
    // y = ln(1+e^x)  =>  x = ln(e^y - 1)
    if y > 20.0 {
        y
    } else {
        (y.exp() - 1.0).ln()
    }
}

/// Shape of the broadcasted result of an elementwise op. Ranks must match;
/// a dimension may only differ when one operand has size 1 there.
pub(crate) fn broadcast_shape(
    op: &'static str,
    a: &[usize],
    b: &[usize],
) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        });
    }
    let mut out = Vec::with_capacity(a.len());
    for (&da, &db) in a.iter().zip(b.iter()) {
        if da == db {
            out.push(da);
        } else if da == 1 {
            out.push(db);
        } else if db == 1 {
            out.push(da);
        } else {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: a.to_vec(),
                rhs: b.to_vec(),
            });
        }
    }
    Ok(out)
}

fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for d in (0..shape.len()).rev() {
        strides[d] = acc;
        acc *= shape[d];
    }
    strides
}

/// Iterates a broadcasted elementwise op, yielding `(out_index, a_offset, b_offset)`.
/// Broadcast dimensions get stride 0 so the same input element is revisited.
pub(crate) struct BroadcastIter {
    out_shape: Vec<usize>,
    a_strides: Vec<usize>,
    b_strides: Vec<usize>,
}

impl BroadcastIter {
    pub fn new(out_shape: &[usize], a_shape: &[usize], b_shape: &[usize]) -> Self {
        let strides_for = |shape: &[usize]| {
            let natural = row_major_strides(shape);
            shape
                .iter()
                .zip(natural.iter())
                .zip(out_shape.iter())
                .map(|((&dim, &st), &out_dim)| if dim == 1 && out_dim > 1 { 0 } else { st })
                .collect::<Vec<_>>()
        };
        BroadcastIter {
            out_shape: out_shape.to_vec(),
            a_strides: strides_for(a_shape),
            b_strides: strides_for(b_shape),
        }
    }

    pub fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        let n: usize = self.out_shape.iter().product();
        if n == 0 {
            return;
        }
        let rank = self.out_shape.len();
        let mut idx = vec![0usize; rank];
        let (mut ao, mut bo) = (0usize, 0usize);
        for i in 0..n {
            f(i, ao, bo);
            for d in (0..rank).rev() {
                idx[d] += 1;
                ao += self.a_strides[d];
                bo += self.b_strides[d];
                if idx[d] < self.out_shape[d] {
                    break;
                }
                ao -= self.a_strides[d] * self.out_shape[d];
                bo -= self.b_strides[d] * self.out_shape[d];
                idx[d] = 0;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_data_must_agree() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 4]).is_ok());
        assert!(matches!(
            Tensor::new(vec![2, 2], vec![1.0; 3]),
            Err(TensorError::ShapeData { .. })
        ));
    }

    #[test]
    fn softplus_matches_hand_values() {
        // ln 2 by hand.
        assert!((softplus(0.0) - 0.6931471805599453).abs() < 1e-15);
        assert_eq!(silu(0.0), 0.0);
    }

    #[test]
    fn softplus_finite_over_wide_range() {
        for i in -700..=700 {
            let x = i as f64;
            assert!(softplus(x).is_finite(), "softplus({x}) not finite");
            assert!(sigmoid(x).is_finite());
            assert!(silu(x).is_finite());
        }
    }

    #[test]
    fn softplus_inverse_round_trips() {
        for &y in &[1e-3, 1e-2, 1e-1, 1.0, 5.0] {
            assert!((softplus(softplus_inverse(y)) - y).abs() < 1e-12);
        }
    }

    #[test]
    fn broadcast_shape_rules() {
        assert_eq!(
            broadcast_shape("t", &[4, 3, 1], &[1, 3, 5]).unwrap(),
            vec![4, 3, 5]
        );
        assert!(broadcast_shape("t", &[4, 3], &[4, 2]).is_err());
        // Rank mismatch is rejected: callers reshape explicitly.
        assert!(broadcast_shape("t", &[4, 3], &[3]).is_err());
    }

    #[test]
    fn broadcast_iter_covers_expansion() {
        // [2,1] * [1,3] -> [2,3]
        let it = BroadcastIter::new(&[2, 3], &[2, 1], &[1, 3]);
        let mut seen = vec![];
        it.for_each(|i, a, b| seen.push((i, a, b)));
        assert_eq!(
            seen,
            vec![
                (0, 0, 0),
                (1, 0, 1),
                (2, 0, 2),
                (3, 1, 0),
                (4, 1, 1),
                (5, 1, 2)
            ]
        );
    }
}
