//! Training loops: full-precision SGD, IntSGD (scalar and block scales),
//! and IntDIANA with full-gradient or L-SVRG estimators.
//!
//! Each logical worker runs on its own thread and talks to the others only
//! through an [`Endpoint`]. The calling thread collects per-iteration
//! reports, checks that the replicated state agrees on every worker, and
//! turns them into [`MetricsRecord`]s.

mod estimator;
mod metrics;
mod worker;

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{channel, Sender};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use log::{debug, warn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregation::{in_process_group, spawn_loopback_aggregator, Endpoint, TcpEndpoint, TransportError};
use crate::problems::{Problem, ProblemError};
use crate::rounding::{IntWidth, RoundingError, RoundingMode};
use crate::scaling::{Denominator, ScaleError, ScalingPolicy};

pub use estimator::{Anchor, EstimatorState, GradientEstimator, RefreshProbability};
pub use metrics::{bits_per_coordinate, MetricsRecord};
pub use worker::{encode_payload, StepStats, WorkerState};

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Problem(#[from] ProblemError),
    #[error(transparent)]
    Rounding(#[from] RoundingError),
    #[error(transparent)]
    Scale(#[from] ScaleError),
    #[error("replicated state diverged at iteration {0}")]
    Replication(u64),
    #[error("metrics sink failed: {0}")]
    Sink(String),
    #[error("worker {0} panicked")]
    WorkerPanic(u32),
    #[error("aborted")]
    Aborted,
}

impl OptimError {
    /// Errors that are only a consequence of another worker failing.
    fn is_secondary(&self) -> bool {
        matches!(self, OptimError::Aborted | OptimError::Transport(TransportError::Disconnected(_)))
    }
}

/// Which update the workers apply after the uncompressed first step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// Uncompressed averaging every step.
    Sgd,
    IntSgd,
    IntDiana,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepSchedule {
    Constant { eta: f64 },
    /// `eta_k = eta0 / sqrt(k + 1)`.
    InvSqrt { eta0: f64 },
}

impl StepSchedule {
    pub fn eta(&self, k: u64) -> f64 {
        match self {
            StepSchedule::Constant { eta } => *eta,
            StepSchedule::InvSqrt { eta0 } => eta0 / ((k + 1) as f64).sqrt(),
        }
    }

    pub fn validate(&self) -> Result<(), OptimError> {
        let v = match self {
            StepSchedule::Constant { eta } => *eta,
            StepSchedule::InvSqrt { eta0 } => *eta0,
        };
        if v > 0.0 && v.is_finite() {
            Ok(())
        } else {
            Err(OptimError::Config(format!("stepsize must be > 0, got {v}")))
        }
    }
}

/// Everything a worker needs to take steps; identical on all workers.
#[derive(Debug, Clone, PartialEq)]
pub struct StepConfig {
    pub kind: OptimizerKind,
    pub policy: ScalingPolicy,
    pub denominator: Denominator,
    pub mode: RoundingMode,
    pub width: IntWidth,
    pub estimator: GradientEstimator,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TransportSpec {
    InProcess,
    /// Connect to an aggregator at `address`, or spawn a loopback one when
    /// `None`.
    Tcp { address: Option<String> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingConfig {
    pub step: StepConfig,
    pub schedule: StepSchedule,
    pub iterations: u64,
    pub transport: TransportSpec,
    pub timeout: Duration,
    /// Starting point; zero when `None`.
    pub x0: Option<Vec<f64>>,
    /// Reference optimal value used for the objective gap.
    pub f_star: Option<f64>,
    /// Record `max |h - mean_i h_i|` every iteration.
    pub track_shifts: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingOutcome {
    pub records: Vec<MetricsRecord>,
    pub final_x: Vec<f64>,
}

struct Report {
    worker_id: u32,
    iteration: u64,
    stats: StepStats,
    oracle_calls: u64,
    digest: u64,
    x: Option<Vec<f64>>,
    h_local: Option<Vec<f64>>,
    h_global: Option<Vec<f64>>,
}

type ServerHandle = thread::JoinHandle<Result<crate::aggregation::SessionStats, TransportError>>;
type Endpoints = (Vec<Box<dyn Endpoint>>, Option<ServerHandle>);

fn open_endpoints(cfg: &TrainingConfig, n: usize) -> Result<Endpoints, OptimError> {
    let width = cfg.step.width;
    match &cfg.transport {
        TransportSpec::InProcess => Ok((
            in_process_group(n, width, cfg.timeout).into_iter().map(|e| Box::new(e) as Box<dyn Endpoint>).collect(),
            None,
        )),
        TransportSpec::Tcp { address } => {
            let (addr, handle) = match address {
                Some(a) => (a.clone(), None),
                None => {
                    let (a, h) = spawn_loopback_aggregator(n, width, cfg.timeout)?;
                    (a.to_string(), Some(h))
                }
            };
            let eps = (0..n as u32)
                .map(|id| TcpEndpoint::connect(addr.as_str(), id, n, cfg.timeout).map(|e| Box::new(e) as Box<dyn Endpoint>))
                .collect::<Result<Vec<_>, _>>()?;
            Ok((eps, handle))
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn worker_main(
    id: u32,
    n: usize,
    problem: &dyn Problem,
    cfg: &TrainingConfig,
    x0: Vec<f64>,
    mut ep: Box<dyn Endpoint>,
    tx: Sender<Report>,
    stop: &AtomicBool,
) -> Result<Vec<f64>, OptimError> {
    let mut w = WorkerState::new(id, n, x0, problem, &cfg.step)?;
    let send = |w: &WorkerState, iteration: u64, stats: StepStats| {
        let report = Report {
            worker_id: id,
            iteration,
            stats,
            oracle_calls: w.estimator.oracle_calls,
            digest: w.digest(),
            x: (id == 0).then(|| w.x.clone()),
            h_local: cfg.track_shifts.then(|| w.h_local.clone()),
            h_global: (cfg.track_shifts && id == 0).then(|| w.h_global.clone()),
        };
        // The collector only hangs up after an error of its own.
        tx.send(report).map_err(|_| OptimError::Aborted)
    };
    for k in 0..cfg.iterations {
        if stop.load(Ordering::Relaxed) {
            return Err(OptimError::Aborted);
        }
        let eta = cfg.schedule.eta(k);
        let stats = if k == 0 { w.exact_first_step(ep.as_mut(), eta)? } else { w.step(ep.as_mut(), k, eta)? };
        send(&w, k + 1, stats)?;
    }
    Ok(w.x)
}

struct Collector<'a> {
    n: usize,
    problems: &'a [Arc<dyn Problem>],
    cfg: &'a TrainingConfig,
    started: Instant,
    oracle_total: u64,
    records: Vec<MetricsRecord>,
}

impl Collector<'_> {
    fn objective(&self, x: &[f64]) -> Result<f64, OptimError> {
        let refs: Vec<&dyn Problem> = self.problems.iter().map(|p| p.as_ref()).collect();
        Ok(crate::problems::global_value(&refs, x)?)
    }

    fn record(&mut self, iteration: u64, x: &[f64], reports: &[Report]) -> Result<MetricsRecord, OptimError> {
        let objective = self.objective(x)?;
        let max_int = reports.first().map_or(0, |r| r.stats.max_int);
        self.oracle_total = reports.iter().map(|r| r.oracle_calls).sum();
        let shift_residual = match reports.first().and_then(|r| r.h_global.as_ref()) {
            Some(h) => {
                let mut worst = 0.0f64;
                for (j, hj) in h.iter().enumerate() {
                    let mut s = 0.0;
                    for r in reports {
                        s += r.h_local.as_ref().expect("shift tracking on")[j];
                    }
                    worst = worst.max((hj - s / self.n as f64).abs());
                }
                Some(worst)
            }
            None => None,
        };
        Ok(MetricsRecord {
            seed: self.cfg.step.seed,
            iteration,
            objective,
            gap: self.cfg.f_star.map(|f| objective - f),
            oracle_calls: self.oracle_total,
            max_int,
            bits: bits_per_coordinate(max_int),
            max_sent: reports.iter().map(|r| r.stats.max_sent).max().unwrap_or(0),
            clipped: reports.iter().map(|r| r.stats.clipped).sum(),
            alpha: reports.first().and_then(|r| r.stats.alpha),
            exact_step: reports.first().is_some_and(|r| r.stats.exact),
            shift_residual,
            wall_us: self.started.elapsed().as_micros() as u64,
        })
    }

    fn complete(&mut self, iteration: u64, mut reports: Vec<Report>) -> Result<MetricsRecord, OptimError> {
        reports.sort_by_key(|r| r.worker_id);
        let digest = reports[0].digest;
        if reports.iter().any(|r| r.digest != digest) {
            return Err(OptimError::Replication(iteration));
        }
        if reports.iter().any(|r| r.stats.max_int != reports[0].stats.max_int) {
            return Err(OptimError::Replication(iteration));
        }
        let x = reports[0].x.take().expect("worker 0 sends its iterate");
        self.record(iteration, &x, &reports)
    }
}

/// Runs `cfg.iterations` steps with one thread per problem. `sink` receives
/// each record as soon as it is complete, so a failing run still delivers
/// every finished iteration.
pub fn run_training(
    cfg: &TrainingConfig,
    problems: &[Arc<dyn Problem>],
    sink: &mut dyn FnMut(&MetricsRecord) -> Result<(), String>,
) -> Result<TrainingOutcome, OptimError> {
    let n = problems.len();
    if n == 0 {
        return Err(OptimError::Config("at least one worker is required".into()));
    }
    let d = problems[0].dim();
    if let Some(p) = problems.iter().find(|p| p.dim() != d) {
        return Err(OptimError::Config(format!("workers disagree on dimension: {d} vs {}", p.dim())));
    }
    cfg.schedule.validate()?;
    cfg.step.policy.validate(d)?;
    let x0 = cfg.x0.clone().unwrap_or_else(|| vec![0.0; d]);
    if x0.len() != d {
        return Err(OptimError::Config(format!("initial point has {} coordinates, problem has {d}", x0.len())));
    }

    let mut collector =
        Collector { n, problems, cfg, started: Instant::now(), oracle_total: 0, records: Vec::new() };
    let first = MetricsRecord {
        shift_residual: cfg.track_shifts.then_some(0.0),
        exact_step: true,
        ..collector.record(0, &x0, &[])?
    };
    sink(&first).map_err(OptimError::Sink)?;
    collector.records.push(first);
    if cfg.iterations == 0 {
        return Ok(TrainingOutcome { records: collector.records, final_x: x0 });
    }

    let (endpoints, aggregator) = open_endpoints(cfg, n)?;
    let stop = AtomicBool::new(false);
    let (tx, rx) = channel::<Report>();

    let (worker_results, collect_result) = thread::scope(|s| {
        let handles: Vec<_> = endpoints
            .into_iter()
            .enumerate()
            .map(|(i, ep)| {
                let tx = tx.clone();
                let stop = &stop;
                let problem = problems[i].as_ref();
                let x0 = x0.clone();
                s.spawn(move || worker_main(i as u32, n, problem, cfg, x0, ep, tx, stop))
            })
            .collect();
        drop(tx);

        let mut pending: BTreeMap<u64, Vec<Report>> = BTreeMap::new();
        let mut collect_result: Result<(), OptimError> = Ok(());
        for report in rx.iter() {
            if collect_result.is_err() {
                continue;
            }
            let k = report.iteration;
            let slot = pending.entry(k).or_default();
            slot.push(report);
            if slot.len() == n {
                let reports = pending.remove(&k).expect("present");
                let step = collector.complete(k, reports).and_then(|rec| {
                    sink(&rec).map_err(OptimError::Sink)?;
                    collector.records.push(rec);
                    Ok(())
                });
                if let Err(e) = step {
                    warn!("stopping run: {e}");
                    stop.store(true, Ordering::Relaxed);
                    collect_result = Err(e);
                }
            }
        }
        let worker_results: Vec<Result<Vec<f64>, OptimError>> = handles
            .into_iter()
            .enumerate()
            .map(|(i, h)| h.join().unwrap_or(Err(OptimError::WorkerPanic(i as u32))))
            .collect();
        (worker_results, collect_result)
    });

    let aggregator_result = aggregator.map(|h| h.join());
    collect_result?;
    let mut primary: Option<OptimError> = None;
    let mut secondary: Option<OptimError> = None;
    let mut final_x = None;
    for r in worker_results {
        match r {
            Ok(x) => final_x = final_x.or(Some(x)),
            Err(e) if e.is_secondary() => secondary = secondary.or(Some(e)),
            Err(e) => primary = primary.or(Some(e)),
        }
    }
    if let Some(e) = primary {
        return Err(e);
    }
    if let Some(e) = secondary {
        // A worker only sees a disconnect when the aggregator failed first.
        if let Some(Ok(Err(agg))) = aggregator_result {
            return Err(agg.into());
        }
        return Err(e);
    }
    if let Some(Ok(Err(agg))) = aggregator_result {
        debug!("aggregator reported {agg} after a successful run");
    }
    Ok(TrainingOutcome { records: collector.records, final_x: final_x.expect("at least one worker") })
}
