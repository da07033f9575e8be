//! L2-regularized logistic regression on contiguous dataset shards.

use std::ops::Range;
use std::sync::Arc;

use super::{check_call, Problem, ProblemError, SparseDataset};

/// A contiguous block of rows owned by one worker.
#[derive(Debug, Clone)]
pub struct Shard {
    pub worker_id: u32,
    pub data: Arc<SparseDataset>,
    pub rows: Range<usize>,
}

impl Shard {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Splits by original row order: worker `i` gets rows `[i m, (i + 1) m)` with
/// `m = floor(N / n)`; the trailing `N - n m` rows are dropped.
pub fn partition_heterogeneous(data: &Arc<SparseDataset>, n: usize) -> Result<Vec<Shard>, ProblemError> {
    if n == 0 || n > data.len() {
        return Err(ProblemError::InvalidInput(format!(
            "cannot split {} rows across {n} workers",
            data.len()
        )));
    }
    let m = data.len() / n;
    Ok((0..n)
        .map(|i| Shard { worker_id: i as u32, data: Arc::clone(data), rows: i * m..(i + 1) * m })
        .collect())
}

/// Estimate of the smoothness constant of the logistic objective over
/// `rows`: the top eigenvalue of `A^T A / (4 |rows|)` by power iteration,
/// plus `lambda`.
pub fn logistic_smoothness(data: &SparseDataset, rows: Range<usize>, lambda: f64, iters: usize) -> f64 {
    let d = data.dim();
    let count = rows.len().max(1) as f64;
    let mut v = vec![1.0 / (d as f64).sqrt(); d];
    let mut eig = 0.0;
    for _ in 0..iters {
        let mut w = vec![0.0; d];
        for i in rows.clone() {
            let row = data.row(i);
            row.axpy(row.dot(&v), &mut w);
        }
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            break;
        }
        eig = norm / count;
        v.iter_mut().zip(&w).for_each(|(vi, wi)| *vi = wi / norm);
    }
    eig / 4.0 + lambda
}

/// `f(x) = (1/m) sum_l log(1 + exp(-b_l a_l^T x)) + (lambda/2) ||x||^2`.
#[derive(Debug, Clone)]
pub struct LogRegProblem {
    shard: Shard,
    lambda: f64,
    smoothness: f64,
}

/// `log(1 + exp(t))` without overflow.
fn softplus(t: f64) -> f64 {
    t.max(0.0) + (-t.abs()).exp().ln_1p()
}

/// `1 / (1 + exp(-t))` without overflow.
fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

impl LogRegProblem {
    pub fn new(shard: Shard, lambda: f64) -> Result<Self, ProblemError> {
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(ProblemError::InvalidInput(format!("lambda must be > 0, got {lambda}")));
        }
        if shard.is_empty() {
            return Err(ProblemError::InvalidInput(format!("worker {} has an empty shard", shard.worker_id)));
        }
        let max_row = shard.rows.clone().map(|i| shard.data.row(i).squared_norm()).fold(0.0, f64::max);
        let smoothness = max_row / 4.0 + lambda;
        Ok(Self { shard, lambda, smoothness })
    }

    pub fn shard(&self) -> &Shard {
        &self.shard
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    fn accumulate(&self, x: &[f64], l: usize, scale: f64, grad: &mut [f64]) -> f64 {
        let row = self.shard.data.row(self.shard.rows.start + l);
        let z = row.label * row.dot(x);
        row.axpy(-row.label * sigmoid(-z) * scale, grad);
        softplus(-z)
    }
}

impl Problem for LogRegProblem {
    fn dim(&self) -> usize {
        self.shard.data.dim()
    }

    fn num_samples(&self) -> usize {
        self.shard.len()
    }

    fn value_grad(&self, x: &[f64], batch: Option<&[usize]>, grad: &mut [f64]) -> Result<f64, ProblemError> {
        check_call(self.dim(), self.num_samples(), x, batch, grad)?;
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut loss = 0.0;
        match batch {
            None => {
                let scale = 1.0 / self.num_samples() as f64;
                for l in 0..self.num_samples() {
                    loss += self.accumulate(x, l, scale, grad);
                }
                loss *= scale;
            }
            Some(b) => {
                let scale = 1.0 / b.len() as f64;
                for &l in b {
                    loss += self.accumulate(x, l, scale, grad);
                }
                loss *= scale;
            }
        }
        let mut sq = 0.0;
        for (g, &xj) in grad.iter_mut().zip(x) {
            *g += self.lambda * xj;
            sq += xj * xj;
        }
        Ok(loss + 0.5 * self.lambda * sq)
    }

    fn value(&self, x: &[f64]) -> Result<f64, ProblemError> {
        check_call(self.dim(), self.num_samples(), x, None, x)?;
        let data = &self.shard.data;
        let mut loss = 0.0;
        for i in self.shard.rows.clone() {
            let row = data.row(i);
            loss += softplus(-row.label * row.dot(x));
        }
        let sq: f64 = x.iter().map(|v| v * v).sum();
        // Same operation order as `value_grad` so both report identical values.
        Ok(loss * (1.0 / self.num_samples() as f64) + 0.5 * self.lambda * sq)
    }

    fn smoothness(&self) -> f64 {
        self.smoothness
    }
}
