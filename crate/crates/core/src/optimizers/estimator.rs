//! Local gradient estimators: full gradient, minibatch, and loopless SVRG.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::problems::{Problem, ProblemError};
use crate::rounding::{worker_stream, StreamPurpose};

/// Probability of refreshing the L-SVRG anchor in a given iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RefreshProbability {
    /// `1 / m`.
    #[default]
    OneOverM,
    /// `tau / m`, the minibatch fraction.
    BatchOverM,
    Value(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientEstimator {
    FullGrad,
    /// Uniform sample of `max(1, floor(fraction m))` local rows without replacement.
    MiniBatch { fraction: f64 },
    LSvrg { fraction: f64, refresh: RefreshProbability },
}

impl GradientEstimator {
    /// Default minibatch fraction, 5% of the local rows.
    pub const DEFAULT_FRACTION: f64 = 0.05;

    pub fn batch_size(&self, m: usize) -> usize {
        match self {
            GradientEstimator::FullGrad => m,
            GradientEstimator::MiniBatch { fraction } | GradientEstimator::LSvrg { fraction, .. } => {
                ((fraction * m as f64).floor() as usize).clamp(1, m)
            }
        }
    }

    pub fn refresh_probability(&self, m: usize) -> Option<f64> {
        match self {
            GradientEstimator::LSvrg { refresh, .. } => Some(match refresh {
                RefreshProbability::OneOverM => 1.0 / m as f64,
                RefreshProbability::BatchOverM => self.batch_size(m) as f64 / m as f64,
                RefreshProbability::Value(p) => *p,
            }),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let check_fraction = |f: f64| {
            if f > 0.0 && f <= 1.0 {
                Ok(())
            } else {
                Err(format!("minibatch fraction must lie in (0, 1], got {f}"))
            }
        };
        match self {
            GradientEstimator::FullGrad => Ok(()),
            GradientEstimator::MiniBatch { fraction } => check_fraction(*fraction),
            GradientEstimator::LSvrg { fraction, refresh } => {
                check_fraction(*fraction)?;
                match refresh {
                    RefreshProbability::Value(p) if !(*p > 0.0 && *p <= 1.0) => {
                        Err(format!("refresh probability must lie in (0, 1], got {p}"))
                    }
                    _ => Ok(()),
                }
            }
        }
    }
}

/// L-SVRG anchor `w` and its full local gradient `u = grad f_i(w)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Anchor {
    pub w: Vec<f64>,
    pub u: Vec<f64>,
}

/// Per-worker estimator state.
#[derive(Debug, Clone)]
pub struct EstimatorState {
    estimator: GradientEstimator,
    worker_id: u32,
    seed: u64,
    batch: usize,
    refresh: Option<f64>,
    anchor: Option<Anchor>,
    scratch: Vec<f64>,
    /// Cumulative component-gradient evaluations.
    pub oracle_calls: u64,
}

impl EstimatorState {
    pub fn new(estimator: GradientEstimator, problem: &dyn Problem, worker_id: u32, seed: u64) -> Result<Self, ProblemError> {
        let m = problem.num_samples();
        if m == 0 {
            return Err(ProblemError::InvalidInput(format!("worker {worker_id} has an empty shard")));
        }
        estimator.validate().map_err(ProblemError::InvalidInput)?;
        Ok(Self {
            batch: estimator.batch_size(m),
            refresh: estimator.refresh_probability(m),
            estimator,
            worker_id,
            seed,
            anchor: None,
            scratch: vec![0.0; problem.dim()],
            oracle_calls: 0,
        })
    }

    pub fn anchor(&self) -> Option<&Anchor> {
        self.anchor.as_ref()
    }

    pub fn batch_size(&self) -> usize {
        self.batch
    }

    fn full(&mut self, problem: &dyn Problem, x: &[f64], out: &mut [f64]) -> Result<(), ProblemError> {
        problem.value_grad(x, None, out)?;
        self.oracle_calls += problem.num_samples() as u64;
        Ok(())
    }

    fn sample(&self, m: usize, iteration: u64) -> Vec<usize> {
        let mut rng = worker_stream(self.seed, self.worker_id, iteration, StreamPurpose::Sampling);
        let mut idx = index::sample(&mut rng, m, self.batch).into_vec();
        // Sorted order keeps the floating-point summation independent of the
        // sampler's internal ordering.
        idx.sort_unstable();
        idx
    }

    /// Writes the estimate of `grad f_i(x)` for `iteration` into `out`.
    pub fn estimate(&mut self, problem: &dyn Problem, x: &[f64], iteration: u64, out: &mut [f64]) -> Result<(), ProblemError> {
        let m = problem.num_samples();
        match self.estimator {
            GradientEstimator::FullGrad => self.full(problem, x, out),
            GradientEstimator::MiniBatch { .. } => {
                if self.batch == m {
                    return self.full(problem, x, out);
                }
                let idx = self.sample(m, iteration);
                problem.value_grad(x, Some(&idx), out)?;
                self.oracle_calls += idx.len() as u64;
                Ok(())
            }
            GradientEstimator::LSvrg { .. } => {
                if self.anchor.is_none() {
                    let mut u = vec![0.0; x.len()];
                    self.full(problem, x, &mut u)?;
                    self.anchor = Some(Anchor { w: x.to_vec(), u });
                }
                let idx = if self.batch == m { None } else { Some(self.sample(m, iteration)) };
                let anchor = self.anchor.as_ref().expect("anchor initialised");
                problem.value_grad(x, idx.as_deref(), out)?;
                problem.value_grad(&anchor.w, idx.as_deref(), &mut self.scratch)?;
                for ((o, s), u) in out.iter_mut().zip(&self.scratch).zip(&anchor.u) {
                    *o = *o - s + u;
                }
                self.oracle_calls += 2 * idx.as_ref().map_or(m, Vec::len) as u64;

                let p = self.refresh.expect("L-SVRG has a refresh probability");
                let mut coin = worker_stream(self.seed, self.worker_id, iteration, StreamPurpose::AnchorRefresh);
                if coin.gen::<f64>() < p {
                    let mut u = vec![0.0; x.len()];
                    self.full(problem, x, &mut u)?;
                    self.anchor = Some(Anchor { w: x.to_vec(), u });
                }
                Ok(())
            }
        }
    }

    /// The L-SVRG estimate for an explicit batch, without sampling or
    /// refreshing. Requires an anchor.
    pub fn lsvrg_estimate_on(
        &mut self,
        problem: &dyn Problem,
        x: &[f64],
        batch: &[usize],
        out: &mut [f64],
    ) -> Result<(), ProblemError> {
        let anchor = self
            .anchor
            .as_ref()
            .ok_or_else(|| ProblemError::InvalidInput("L-SVRG anchor not initialised".into()))?;
        problem.value_grad(x, Some(batch), out)?;
        problem.value_grad(&anchor.w, Some(batch), &mut self.scratch)?;
        for ((o, s), u) in out.iter_mut().zip(&self.scratch).zip(&anchor.u) {
            *o = *o - s + u;
        }
        Ok(())
    }

    /// Sets the anchor to `w` and recomputes its full gradient.
    pub fn set_anchor(&mut self, problem: &dyn Problem, w: &[f64]) -> Result<(), ProblemError> {
        let mut u = vec![0.0; w.len()];
        self.full(problem, w, &mut u)?;
        self.anchor = Some(Anchor { w: w.to_vec(), u });
        Ok(())
    }
}
