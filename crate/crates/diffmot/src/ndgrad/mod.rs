//! Dense-array math with reverse-mode automatic differentiation.
//!
//! This is the substrate under every learned component: a build-once
//! evaluate-many computation [`Graph`] over row-major 64-bit [`Array`]s, a
//! seedable [`Rng`], and a central-finite-difference checker used to verify
//! every gradient the graph produces.

mod fdcheck;
mod graph;
mod rng;

pub use fdcheck::finite_diff_check;
pub use graph::{Bindings, Evaluation, Gradients, Graph, GraphBuilder, NodeId};
pub use rng::Rng;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum GradError {
    #[error("shape mismatch at {node}: {detail}")]
    ShapeMismatch { node: String, detail: String },
    #[error("unbound input '{0}'")]
    UnboundInput(String),
    #[error("unknown output '{0}'")]
    UnknownOutput(String),
    #[error("non-finite value produced at {node}")]
    NonFinite { node: String },
    #[error("backward seed '{0}' is not scalar")]
    NonScalarSeed(String),
    #[error("{0}")]
    Invalid(String),
}

/// A dense row-major array of 64-bit floats.
///
/// Rank is 1 or 2 in practice; scalars are length-1 arrays. The invariant
/// `shape.iter().product() == data.len()` holds for every constructor.
#[derive(Debug, Clone, PartialEq)]
pub struct Array {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Array {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Array { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Array {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Array {
            shape: vec![1],
            data: vec![v],
        }
    }

    /// 2-D array from a flat row-major buffer.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        Array::from_vec(vec![rows, cols], data)
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Array {
            shape: vec![data.len()],
            data,
        }
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Row count: 2-D arrays report their first dimension, 1-D arrays are a
    /// single row.
    pub fn rows(&self) -> usize {
        if self.shape.len() == 2 {
            self.shape[0]
        } else {
            1
        }
    }

    /// Column count: last dimension.
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&0)
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn scalar_value(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn fill_normal(shape: Vec<usize>, rng: &mut Rng) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.normal()).collect();
        Array { shape, data }
    }

    pub fn fill_uniform(shape: Vec<usize>, lo: f64, hi: f64, rng: &mut Rng) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.uniform_in(lo, hi)).collect();
        Array { shape, data }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn array_invariants() {
        let a = Array::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(a.rows(), 2);
        assert_eq!(a.cols(), 3);
        assert_eq!(a.at(1, 2), 6.0);
        assert_eq!(a.row(0), &[1.0, 2.0, 3.0]);
    }

    #[test]
    #[should_panic]
    fn mismatched_shape_panics() {
        let _ = Array::from_vec(vec![2, 2], vec![1.0, 2.0, 3.0]);
    }
}
