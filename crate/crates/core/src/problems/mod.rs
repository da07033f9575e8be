//! Loss and gradient oracles over local data shards.

mod libsvm;
mod logreg;
mod quadratic;
mod reference;

use thiserror::Error;

pub use libsvm::{load_libsvm, parse_libsvm, to_libsvm_string, Row, SparseDataset};
pub use logreg::{logistic_smoothness, partition_heterogeneous, LogRegProblem, Shard};
pub use quadratic::{make_least_squares, make_quadratic, LeastSquares, LeastSquaresInstance, LeastSquaresSpec, QuadraticProblem};
pub use reference::{
    load_cached_optimum, reference_optimum, solve_reference_optimum, store_cached_optimum, ReferenceOptimum,
    SolverOptions,
};

#[derive(Debug, Error)]
pub enum ProblemError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("sample index {index} out of range for {len} samples")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("reference solver failed: {0}")]
    SolverFailure(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// Finite-sum objective `f(x) = (1/m) sum_l f_l(x)` held by one worker.
pub trait Problem: Send + Sync {
    fn dim(&self) -> usize;

    /// Number of component functions `m`.
    fn num_samples(&self) -> usize;

    /// Average value and gradient over `batch` (every sample when `None`),
    /// writing the gradient into `grad`.
    fn value_grad(&self, x: &[f64], batch: Option<&[usize]>, grad: &mut [f64]) -> Result<f64, ProblemError>;

    fn value(&self, x: &[f64]) -> Result<f64, ProblemError> {
        let mut g = vec![0.0; self.dim()];
        self.value_grad(x, None, &mut g)
    }

    /// Upper bound on the smoothness constant of the full local objective.
    fn smoothness(&self) -> f64;
}

pub(crate) fn check_call(
    dim: usize,
    samples: usize,
    x: &[f64],
    batch: Option<&[usize]>,
    grad: &[f64],
) -> Result<(), ProblemError> {
    if x.len() != dim {
        return Err(ProblemError::DimensionMismatch { expected: dim, actual: x.len() });
    }
    if grad.len() != dim {
        return Err(ProblemError::DimensionMismatch { expected: dim, actual: grad.len() });
    }
    if let Some(b) = batch {
        if b.is_empty() {
            return Err(ProblemError::EmptyBatch);
        }
        if let Some(&index) = b.iter().find(|&&i| i >= samples) {
            return Err(ProblemError::IndexOutOfRange { index, len: samples });
        }
    }
    Ok(())
}

/// Average of the local objectives, `(1/n) sum_i f_i(x)`.
pub fn global_value(problems: &[&dyn Problem], x: &[f64]) -> Result<f64, ProblemError> {
    let mut total = 0.0;
    for p in problems {
        total += p.value(x)?;
    }
    Ok(total / problems.len() as f64)
}

/// Gradient of the averaged objective.
pub fn global_gradient(problems: &[&dyn Problem], x: &[f64]) -> Result<Vec<f64>, ProblemError> {
    let d = x.len();
    let mut sum = vec![0.0; d];
    let mut g = vec![0.0; d];
    for p in problems {
        p.value_grad(x, None, &mut g)?;
        for (s, gi) in sum.iter_mut().zip(&g) {
            *s += gi;
        }
    }
    let n = problems.len() as f64;
    sum.iter_mut().for_each(|s| *s /= n);
    Ok(sum)
}
