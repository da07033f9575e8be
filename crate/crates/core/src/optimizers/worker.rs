//! Per-worker replicated state and the step functions.

use std::collections::hash_map::DefaultHasher;
use std::hash::Hasher;

use super::estimator::EstimatorState;
use super::{OptimError, OptimizerKind, StepConfig};
use crate::aggregation::{clip_for_width, Endpoint};
use crate::problems::Problem;
use crate::rounding::{dequantize, quantize, worker_stream, IntVector, StreamPurpose};
use crate::scaling::{heuristic_alpha, ScaleError, ScalingPolicy, ScalingState};

/// Communication statistics of one step.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepStats {
    /// Largest magnitude in the aggregated integer vector.
    pub max_int: u64,
    /// Largest magnitude this worker produced before clipping.
    pub max_sent: u64,
    /// Coordinates this worker clipped.
    pub clipped: u64,
    /// Smallest per-coordinate scale used, `None` for uncompressed steps.
    pub alpha: Option<f64>,
    /// The step was sent uncompressed.
    pub exact: bool,
}

/// Everything one worker holds. Apart from `h_local`, the estimator
/// state and `grad`, every field is replicated bit-identically across
/// workers.
pub struct WorkerState<'a> {
    pub worker_id: u32,
    pub workers: usize,
    pub x: Vec<f64>,
    pub x_prev: Vec<f64>,
    /// DIANA shift `h_i`.
    pub h_local: Vec<f64>,
    /// DIANA global shift `h = (1/n) sum_i h_i`.
    pub h_global: Vec<f64>,
    pub scaling: ScalingState,
    pub estimator: EstimatorState,
    pub grad: Vec<f64>,
    problem: &'a dyn Problem,
    cfg: &'a StepConfig,
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Sum of the gathered vectors in worker order, divided by `n`.
fn mean_of(vectors: &[Vec<f64>]) -> Vec<f64> {
    let mut sum = vectors[0].clone();
    for v in &vectors[1..] {
        for (s, x) in sum.iter_mut().zip(v) {
            *s += x;
        }
    }
    let n = vectors.len() as f64;
    sum.iter_mut().for_each(|s| *s /= n);
    sum
}

/// Quantizes `payload` with scale `alpha` and clips it for the wire.
/// Returns the integers to send and `(max_sent, clipped)`.
pub fn encode_payload(
    payload: &[f64],
    alpha: &[f64],
    cfg: &StepConfig,
    n: usize,
    rng: &mut impl rand::Rng,
) -> Result<(IntVector, u64, u64), OptimError> {
    let q = quantize(payload, alpha, cfg.mode, rng)?;
    let max_sent = q.iter().map(|v| v.unsigned_abs()).max().unwrap_or(0);
    let (clipped, count) = clip_for_width(&q, cfg.width, n)?;
    Ok((clipped, max_sent, count as u64))
}

fn widen(v: &IntVector) -> Vec<i64> {
    v.values().iter().map(|&x| x as i64).collect()
}

fn min_alpha(alpha: &[f64]) -> f64 {
    alpha.iter().copied().fold(f64::INFINITY, f64::min)
}

impl<'a> WorkerState<'a> {
    pub fn new(
        worker_id: u32,
        workers: usize,
        x0: Vec<f64>,
        problem: &'a dyn Problem,
        cfg: &'a StepConfig,
    ) -> Result<Self, OptimError> {
        let d = problem.dim();
        if x0.len() != d {
            return Err(OptimError::Config(format!("initial point has {} coordinates, problem has {d}", x0.len())));
        }
        cfg.policy.validate(d)?;
        let estimator = EstimatorState::new(cfg.estimator.clone(), problem, worker_id, cfg.seed)?;
        Ok(Self {
            worker_id,
            workers,
            x_prev: x0.clone(),
            x: x0,
            h_local: vec![0.0; d],
            h_global: vec![0.0; d],
            scaling: ScalingState::for_policy(&cfg.policy),
            estimator,
            grad: vec![0.0; d],
            problem,
            cfg,
        })
    }

    /// Hash of the replicated state, used to verify that all workers agree.
    pub fn digest(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for v in self.x.iter().chain(&self.x_prev).chain(&self.h_global).chain(&self.scaling.r).chain(&self.scaling.last_alpha) {
            h.write_u64(v.to_bits());
        }
        h.write_u64(self.scaling.k);
        h.finish()
    }

    fn compute_gradient(&mut self, iteration: u64) -> Result<(), OptimError> {
        let mut g = std::mem::take(&mut self.grad);
        let res = self.estimator.estimate(self.problem, &self.x, iteration, &mut g);
        self.grad = g;
        res.map_err(OptimError::from)
    }

    fn take_step(&mut self, eta: f64, direction: &[f64]) {
        self.x_prev.clone_from(&self.x);
        axpy(&mut self.x, -eta, direction);
    }

    /// `x^1 = x^0 - eta_0 (1/n) sum_i g_i^0`, uncompressed. Shifts stay zero.
    pub fn exact_first_step(&mut self, ep: &mut dyn Endpoint, eta0: f64) -> Result<StepStats, OptimError> {
        self.compute_gradient(0)?;
        let all = ep.allgather(0, self.grad.clone())?;
        let mean = mean_of(&all);
        self.take_step(eta0, &mean);
        Ok(StepStats { exact: true, ..StepStats::default() })
    }

    /// One iteration `k >= 1` of the configured method.
    pub fn step(&mut self, ep: &mut dyn Endpoint, k: u64, eta: f64) -> Result<StepStats, OptimError> {
        self.compute_gradient(k)?;
        match self.cfg.kind {
            OptimizerKind::Sgd => self.exact_sgd_step(ep, k, eta),
            OptimizerKind::IntSgd => self.intsgd_step(ep, k, eta),
            OptimizerKind::IntDiana => self.intdiana_step(ep, k, eta),
        }
    }

    /// Scale for iteration `k`, or `None` when the step must go uncompressed.
    fn resolve_alpha(&mut self, ep: &mut dyn Endpoint, k: u64, eta: f64, payload: &[f64]) -> Result<Option<Vec<f64>>, OptimError> {
        let d = payload.len();
        match &self.cfg.policy {
            ScalingPolicy::Exact => Ok(None),
            ScalingPolicy::Fixed { alpha } => Ok(Some(vec![*alpha; d])),
            ScalingPolicy::Heuristic { nb, rule } => {
                let local = payload.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                let all = ep.allgather(k, vec![local])?;
                let global = all.iter().map(|v| v[0]).fold(0.0f64, f64::max);
                Ok(Some(vec![heuristic_alpha(global, *nb, self.workers, *rule); d]))
            }
            policy => {
                let dx: Vec<f64> = self.x.iter().zip(&self.x_prev).map(|(a, b)| a - b).collect();
                match self.scaling.advance(policy, &dx, eta, self.workers, self.cfg.denominator) {
                    Ok(alpha) => Ok(Some(alpha)),
                    Err(ScaleError::Degenerate { .. }) => {
                        self.scaling.last_alpha.clear();
                        Ok(None)
                    }
                    Err(e) => Err(e.into()),
                }
            }
        }
    }

    fn exact_sgd_step(&mut self, ep: &mut dyn Endpoint, k: u64, eta: f64) -> Result<StepStats, OptimError> {
        let grad = std::mem::take(&mut self.grad);
        let result = self.exact_sgd_step_with(ep, k, eta, &grad);
        self.grad = grad;
        result
    }

    fn block_count(&self) -> u32 {
        match &self.cfg.policy {
            ScalingPolicy::BlockAdaptive { partition, .. } => partition.len() as u32,
            _ => 1,
        }
    }

    /// `g~ = dequantize(allreduce(clip(Int(alpha g_i))))`, `x <- x - eta g~`.
    pub fn intsgd_step(&mut self, ep: &mut dyn Endpoint, k: u64, eta: f64) -> Result<StepStats, OptimError> {
        let grad = std::mem::take(&mut self.grad);
        let result = self.intsgd_inner(ep, k, eta, &grad);
        self.grad = grad;
        result
    }

    fn intsgd_inner(&mut self, ep: &mut dyn Endpoint, k: u64, eta: f64, grad: &[f64]) -> Result<StepStats, OptimError> {
        let Some(alpha) = self.resolve_alpha(ep, k, eta, grad)? else {
            return self.exact_sgd_step_with(ep, k, eta, grad);
        };
        let mut rng = worker_stream(self.cfg.seed, self.worker_id, k, StreamPurpose::Rounding);
        let (q, max_sent, clipped) = encode_payload(grad, &alpha, self.cfg, self.workers, &mut rng)?;
        let sum = ep.allreduce_sum(k, self.block_count(), q)?;
        let g_tilde = dequantize(&widen(&sum), &alpha, self.workers)?;
        self.take_step(eta, &g_tilde);
        Ok(StepStats { max_int: sum.max_abs(), max_sent, clipped, alpha: Some(min_alpha(&alpha)), exact: false })
    }

    fn exact_sgd_step_with(&mut self, ep: &mut dyn Endpoint, k: u64, eta: f64, grad: &[f64]) -> Result<StepStats, OptimError> {
        let all = ep.allgather(k, grad.to_vec())?;
        let mean = mean_of(&all);
        self.take_step(eta, &mean);
        Ok(StepStats { exact: true, ..StepStats::default() })
    }

    /// Compresses `g_i - h_i`:
    /// `g~ = h + (1/(n alpha)) sum_i Int(alpha (g_i - h_i))`,
    /// `h_i <- h_i + (1/alpha) Int(alpha (g_i - h_i))`, `h <- h + (g~ - h)`.
    pub fn intdiana_step(&mut self, ep: &mut dyn Endpoint, k: u64, eta: f64) -> Result<StepStats, OptimError> {
        let diff: Vec<f64> = self.grad.iter().zip(&self.h_local).map(|(g, h)| g - h).collect();
        let Some(alpha) = self.resolve_alpha(ep, k, eta, &diff)? else {
            // Uncompressed DIANA: the shift catches up with the gradient.
            let all = ep.allgather(k, diff.clone())?;
            let mean_diff = mean_of(&all);
            let g_tilde: Vec<f64> = self.h_global.iter().zip(&mean_diff).map(|(h, m)| h + m).collect();
            self.take_step(eta, &g_tilde);
            axpy(&mut self.h_local, 1.0, &diff);
            axpy(&mut self.h_global, 1.0, &mean_diff);
            return Ok(StepStats { exact: true, ..StepStats::default() });
        };
        let mut rng = worker_stream(self.cfg.seed, self.worker_id, k, StreamPurpose::Rounding);
        let (q, max_sent, clipped) = encode_payload(&diff, &alpha, self.cfg, self.workers, &mut rng)?;
        let local: Vec<f64> = q.values().iter().zip(&alpha).map(|(&v, a)| v as f64 / a).collect();
        let sum = ep.allreduce_sum(k, self.block_count(), q)?;
        let decoded = dequantize(&widen(&sum), &alpha, self.workers)?;
        let g_tilde: Vec<f64> = self.h_global.iter().zip(&decoded).map(|(h, m)| h + m).collect();
        self.take_step(eta, &g_tilde);
        axpy(&mut self.h_local, 1.0, &local);
        axpy(&mut self.h_global, 1.0, &decoded);
        Ok(StepStats { max_int: sum.max_abs(), max_sent, clipped, alpha: Some(min_alpha(&alpha)), exact: false })
    }
}
