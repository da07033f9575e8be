//! Runs configured experiments and persists their metrics.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use log::{info, warn};
use rayon::prelude::*;

use super::config::{ExperimentConfig, ProblemSpec, StepSize, SyntheticKind, TransportChoice};
use super::HarnessError;
use crate::optimizers::{run_training, MetricsRecord, StepConfig, TrainingConfig, TransportSpec};
use crate::problems::{
    load_libsvm, logistic_smoothness, make_least_squares, make_quadratic, partition_heterogeneous, reference_optimum,
    LeastSquaresSpec, LogRegProblem, Problem, Shard, SolverOptions,
};

/// Worker objectives plus what the harness needs to know about their average.
pub struct ProblemSet {
    pub label: String,
    pub problems: Vec<Arc<dyn Problem>>,
    pub f_star: Option<f64>,
    /// Smoothness constant of the averaged objective (or an upper bound).
    pub smoothness: f64,
    pub x0: Option<Vec<f64>>,
}

const POWER_ITERATIONS: usize = 200;

fn io_err(path: &Path, source: std::io::Error) -> HarnessError {
    HarnessError::Io { path: path.display().to_string(), source }
}

/// Builds the per-worker problems, the reference optimum and `L`.
pub fn build_problems(cfg: &ExperimentConfig) -> Result<ProblemSet, HarnessError> {
    let n = cfg.workers;
    match &cfg.problem {
        ProblemSpec::Dataset { path, lambda, dim } => {
            let data = Arc::new(load_libsvm(path, *dim)?);
            let shards = partition_heterogeneous(&data, n)?;
            let used = shards.last().map_or(0, |s| s.rows.end);
            let problems = shards
                .into_iter()
                .map(|s| LogRegProblem::new(s, *lambda).map(|p| Arc::new(p) as Arc<dyn Problem>))
                .collect::<Result<Vec<_>, _>>()?;
            // The averaged objective over equal shards is the objective over
            // every row actually used.
            let whole = LogRegProblem::new(Shard { worker_id: 0, data: Arc::clone(&data), rows: 0..used }, *lambda)?;
            let key = data.content_hash(used);
            let opt = reference_optimum(&whole, &key, *lambda, Some(&cfg.cache_dir), &SolverOptions::default())?;
            info!("reference optimum f* = {:.17e} (|grad|^2 = {:.2e})", opt.f, opt.grad_norm_sq);
            let label = path.file_name().map_or_else(|| "dataset".into(), |s| s.to_string_lossy().into_owned());
            Ok(ProblemSet {
                label,
                problems,
                f_star: Some(opt.f),
                smoothness: logistic_smoothness(&data, 0..used, *lambda, POWER_ITERATIONS),
                x0: None,
            })
        }
        ProblemSpec::Synthetic(s) => match s.kind {
            SyntheticKind::Quadratic => {
                let noise = s.noise_samples.map(|m| (m, s.noise_sigma));
                let problems = (0..n as u64)
                    .map(|i| {
                        make_quadratic(s.dim, s.kappa, noise, s.seed.wrapping_add(i))
                            .map(|q| Arc::new(q) as Arc<dyn Problem>)
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                Ok(ProblemSet {
                    label: "quadratic".into(),
                    problems,
                    f_star: Some(0.0),
                    smoothness: 1.0,
                    x0: Some(vec![s.init; s.dim]),
                })
            }
            SyntheticKind::LeastSquares => {
                let inst = make_least_squares(&LeastSquaresSpec {
                    dim: s.dim,
                    workers: n,
                    spectrum_decay: s.spectrum_decay,
                    init_decay: s.init_decay,
                    seed: s.seed,
                })?;
                Ok(ProblemSet {
                    label: "least_squares".into(),
                    problems: inst.shards.into_iter().map(|p| Arc::new(p) as Arc<dyn Problem>).collect(),
                    f_star: Some(0.0),
                    smoothness: inst.smoothness,
                    x0: None,
                })
            }
        },
    }
}

#[derive(Debug)]
pub struct SeedOutcome {
    pub seed: u64,
    pub csv: PathBuf,
    /// Every record that completed, including those before a failure.
    pub records: Vec<MetricsRecord>,
    pub error: Option<String>,
}

#[derive(Debug)]
pub struct ExperimentReport {
    pub seeds: Vec<SeedOutcome>,
    pub summary: PathBuf,
    pub eta: f64,
}

impl ExperimentReport {
    pub fn failures(&self) -> impl Iterator<Item = &SeedOutcome> {
        self.seeds.iter().filter(|s| s.error.is_some())
    }
}

fn training_config(cfg: &ExperimentConfig, set: &ProblemSet, eta: f64, seed: u64) -> TrainingConfig {
    TrainingConfig {
        step: StepConfig {
            kind: cfg.algorithm.kind(),
            policy: cfg.policy.resolve(set.problems[0].dim()).expect("validated before the run"),
            denominator: cfg.denominator,
            mode: cfg.rounding,
            width: cfg.width,
            estimator: cfg.estimator.clone(),
            seed,
        },
        schedule: cfg.schedule(eta),
        iterations: cfg.iterations,
        transport: match cfg.transport {
            TransportChoice::InProcess => TransportSpec::InProcess,
            TransportChoice::Tcp => TransportSpec::Tcp { address: cfg.address.clone() },
        },
        timeout: cfg.timeout,
        x0: set.x0.clone(),
        f_star: set.f_star,
        track_shifts: cfg.track_shifts,
    }
}

fn run_seed(cfg: &ExperimentConfig, set: &ProblemSet, eta: f64, seed: u64) -> SeedOutcome {
    let csv_path = cfg.output_dir.join(format!("seed_{seed}.csv"));
    let timing_path = cfg.output_dir.join(format!("seed_{seed}.timing.csv"));
    let mut records = Vec::new();
    let result = (|| -> Result<(), HarnessError> {
        let file = File::create(&csv_path).map_err(|e| io_err(&csv_path, e))?;
        let mut writer = csv::Writer::from_writer(BufWriter::new(file));
        let tcfg = training_config(cfg, set, eta, seed);
        let mut sink = |r: &MetricsRecord| -> Result<(), String> {
            writer.serialize(r).map_err(|e| e.to_string())?;
            records.push(r.clone());
            Ok(())
        };
        let outcome = run_training(&tcfg, &set.problems, &mut sink);
        writer.flush().map_err(|e| io_err(&csv_path, e))?;
        outcome?;
        Ok(())
    })();
    if let Err(e) = write_timing(&timing_path, &records) {
        warn!("seed {seed}: {e}");
    }
    let error = result.err().map(|e| {
        warn!("seed {seed} failed after {} records: {e}", records.len());
        e.to_string()
    });
    SeedOutcome { seed, csv: csv_path, records, error }
}

fn write_timing(path: &Path, records: &[MetricsRecord]) -> Result<(), HarnessError> {
    let mut w = BufWriter::new(File::create(path).map_err(|e| io_err(path, e))?);
    let mut body = String::from("iteration,wall_us\n");
    for r in records {
        body.push_str(&format!("{},{}\n", r.iteration, r.wall_us));
    }
    w.write_all(body.as_bytes()).and_then(|_| w.flush()).map_err(|e| io_err(path, e))
}

/// Runs every seed, writing `seed_<s>.csv`, `seed_<s>.timing.csv` and
/// `summary.csv` into the output directory. A failing seed is reported in
/// the returned report; the remaining seeds still run.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport, HarnessError> {
    if cfg.parallel_seeds && cfg.address.is_some() && cfg.seeds.len() > 1 {
        return Err(HarnessError::Config(
            "parallel_seeds: an external aggregator serves one session at a time".into(),
        ));
    }
    let set = build_problems(cfg)?;
    let d = set.problems[0].dim();
    cfg.policy.resolve(d).map_err(HarnessError::Config)?;
    let eta = match cfg.step {
        StepSize::Absolute(e) => e,
        StepSize::OverL(c) => c / set.smoothness,
    };
    info!("{}: {} on {} (d = {d}, n = {}, eta = {eta:.6e})", cfg.name, cfg.algorithm.name(), set.label, cfg.workers);
    fs::create_dir_all(&cfg.output_dir).map_err(|e| io_err(&cfg.output_dir, e))?;

    let seeds: Vec<SeedOutcome> = if cfg.parallel_seeds {
        cfg.seeds.par_iter().map(|&s| run_seed(cfg, &set, eta, s)).collect()
    } else {
        cfg.seeds.iter().map(|&s| run_seed(cfg, &set, eta, s)).collect()
    };

    let complete: Vec<&[MetricsRecord]> =
        seeds.iter().filter(|s| s.error.is_none()).map(|s| s.records.as_slice()).collect();
    let rows = summarize(&complete);
    let summary = cfg.output_dir.join("summary.csv");
    write_summary(&summary, cfg.algorithm.name(), &set.label, &rows)?;
    Ok(ExperimentReport { seeds, summary, eta })
}

/// Reads a per-seed metrics file.
pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRecord>, HarnessError> {
    let csv_err = |e: csv::Error| HarnessError::Csv { path: path.display().to_string(), message: e.to_string() };
    let mut reader = csv::Reader::from_path(path).map_err(csv_err)?;
    reader.deserialize().collect::<Result<Vec<MetricsRecord>, _>>().map_err(csv_err)
}

/// Summary columns, in file order.
pub const SUMMARY_METRICS: [&str; 8] =
    ["objective", "gap", "oracle_calls", "max_int", "bits", "max_sent", "clipped", "alpha"];

fn metric(r: &MetricsRecord, name: &str) -> Option<f64> {
    match name {
        "objective" => Some(r.objective),
        "gap" => r.gap,
        "oracle_calls" => Some(r.oracle_calls as f64),
        "max_int" => Some(r.max_int as f64),
        "bits" => Some(r.bits as f64),
        "max_sent" => Some(r.max_sent as f64),
        "clipped" => Some(r.clipped as f64),
        "alpha" => r.alpha,
        _ => None,
    }
}

/// Median and quartiles across seeds at one iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub iteration: u64,
    pub seeds: usize,
    /// `(median, q25, q75)` per entry of [`SUMMARY_METRICS`].
    pub stats: Vec<Option<(f64, f64, f64)>>,
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn summarize(runs: &[&[MetricsRecord]]) -> Vec<SummaryRow> {
    let len = runs.iter().map(|r| r.len()).max().unwrap_or(0);
    (0..len)
        .map(|i| {
            let at: Vec<&MetricsRecord> = runs.iter().filter_map(|r| r.get(i)).collect();
            let stats = SUMMARY_METRICS
                .iter()
                .map(|m| {
                    let mut v: Vec<f64> = at.iter().filter_map(|r| metric(r, m)).filter(|x| !x.is_nan()).collect();
                    if v.is_empty() {
                        return None;
                    }
                    v.sort_by(f64::total_cmp);
                    Some((quantile(&v, 0.5), quantile(&v, 0.25), quantile(&v, 0.75)))
                })
                .collect();
            SummaryRow { iteration: at[0].iteration, seeds: at.len(), stats }
        })
        .collect()
}

pub fn write_summary(path: &Path, algorithm: &str, dataset: &str, rows: &[SummaryRow]) -> Result<(), HarnessError> {
    let csv_err = |e: csv::Error| HarnessError::Csv { path: path.display().to_string(), message: e.to_string() };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut header = vec!["algorithm".to_string(), "dataset".into(), "iteration".into(), "seeds".into()];
    for m in SUMMARY_METRICS {
        header.extend([format!("{m}_median"), format!("{m}_q25"), format!("{m}_q75")]);
    }
    w.write_record(&header).map_err(csv_err)?;
    for row in rows {
        let mut rec = vec![algorithm.to_string(), dataset.to_string(), row.iteration.to_string(), row.seeds.to_string()];
        for s in &row.stats {
            match s {
                Some((med, lo, hi)) => rec.extend([format!("{med:?}"), format!("{lo:?}"), format!("{hi:?}")]),
                None => rec.extend([String::new(), String::new(), String::new()]),
            }
        }
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(|e| io_err(path, e))
}
