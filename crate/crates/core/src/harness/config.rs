//! Experiment configuration files (TOML).

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::optimizers::{GradientEstimator, OptimizerKind, RefreshProbability, StepSchedule};
use crate::rounding::{IntWidth, RoundingMode};
use crate::scaling::{BlockPartition, Denominator, ExponentRule, ScalingPolicy};

/// Environment variable overriding the reference-optimum cache directory.
pub const CACHE_DIR_ENV: &str = "INTSGD_CACHE_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Sgd,
    Intsgd,
    IntsgdBlock,
    IntdianaGd,
    IntdianaLsvrg,
    Intgd,
}

impl FromStr for Algorithm {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "sgd" => Algorithm::Sgd,
            "intsgd" => Algorithm::Intsgd,
            "intsgd_block" => Algorithm::IntsgdBlock,
            "intdiana_gd" => Algorithm::IntdianaGd,
            "intdiana_lsvrg" => Algorithm::IntdianaLsvrg,
            "intgd" => Algorithm::Intgd,
            "" => return Err("must not be empty".into()),
            other => {
                return Err(format!(
                    "unknown algorithm {other:?} (expected sgd, intsgd, intsgd_block, intdiana_gd, intdiana_lsvrg or intgd)"
                ))
            }
        })
    }
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Sgd => "sgd",
            Algorithm::Intsgd => "intsgd",
            Algorithm::IntsgdBlock => "intsgd_block",
            Algorithm::IntdianaGd => "intdiana_gd",
            Algorithm::IntdianaLsvrg => "intdiana_lsvrg",
            Algorithm::Intgd => "intgd",
        }
    }

    pub fn kind(self) -> OptimizerKind {
        match self {
            Algorithm::Sgd => OptimizerKind::Sgd,
            Algorithm::Intsgd | Algorithm::IntsgdBlock | Algorithm::Intgd => OptimizerKind::IntSgd,
            Algorithm::IntdianaGd | Algorithm::IntdianaLsvrg => OptimizerKind::IntDiana,
        }
    }

    fn default_estimator(self) -> EstimatorKind {
        match self {
            Algorithm::Sgd | Algorithm::Intsgd | Algorithm::IntsgdBlock => EstimatorKind::Minibatch,
            Algorithm::IntdianaGd | Algorithm::Intgd => EstimatorKind::Full,
            Algorithm::IntdianaLsvrg => EstimatorKind::Lsvrg,
        }
    }

    fn default_policy(self) -> PolicyKind {
        match self {
            Algorithm::Sgd => PolicyKind::Exact,
            Algorithm::Intsgd => PolicyKind::MovingAverage,
            Algorithm::IntsgdBlock => PolicyKind::Block,
            Algorithm::IntdianaGd | Algorithm::IntdianaLsvrg | Algorithm::Intgd => PolicyKind::Adaptive,
        }
    }
}

/// `"a..b"` (inclusive), a single integer, or an explicit list.
#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(untagged)]
pub enum SeedSpec {
    Range(String),
    One(u64),
    List(Vec<u64>),
}

impl Default for SeedSpec {
    fn default() -> Self {
        SeedSpec::One(0)
    }
}

pub fn parse_seeds(spec: &SeedSpec) -> Result<Vec<u64>, String> {
    match spec {
        SeedSpec::One(s) => Ok(vec![*s]),
        SeedSpec::List(v) if v.is_empty() => Err("seed list is empty".into()),
        SeedSpec::List(v) => Ok(v.clone()),
        SeedSpec::Range(s) => {
            let s = s.trim();
            if let Some((a, b)) = s.split_once("..") {
                let b = b.strip_prefix('=').unwrap_or(b);
                let lo: u64 = a.trim().parse().map_err(|_| format!("bad seed range start {a:?}"))?;
                let hi: u64 = b.trim().parse().map_err(|_| format!("bad seed range end {b:?}"))?;
                if hi < lo {
                    return Err(format!("empty seed range {s:?}"));
                }
                Ok((lo..=hi).collect())
            } else {
                s.parse().map(|v| vec![v]).map_err(|_| format!("bad seed spec {s:?}"))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransportChoice {
    #[default]
    InProcess,
    Tcp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    MovingAverage,
    Adaptive,
    Block,
    Heuristic,
    Fixed,
    Exact,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    Full,
    Minibatch,
    Lsvrg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    #[default]
    Constant,
    InvSqrt,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub path: PathBuf,
    /// Defaults by file name for the four benchmark datasets.
    pub lambda: Option<f64>,
    pub dim: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticKind {
    Quadratic,
    LeastSquares,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSection {
    pub kind: SyntheticKind,
    pub dim: usize,
    /// Quadratic: condition number.
    #[serde(default = "one")]
    pub kappa: f64,
    /// Quadratic: number of noisy components per worker.
    pub noise_samples: Option<usize>,
    /// Quadratic: single-sample gradient noise level.
    #[serde(default)]
    pub noise_sigma: f64,
    /// Least squares: eigenvalue decay exponent.
    #[serde(default = "two")]
    pub spectrum_decay: f64,
    /// Least squares: decay exponent of the initial error.
    #[serde(default = "one")]
    pub init_decay: f64,
    /// Quadratic: every coordinate of the starting point.
    #[serde(default = "one")]
    pub init: f64,
    #[serde(default)]
    pub seed: u64,
}

fn one() -> f64 {
    1.0
}

fn two() -> f64 {
    2.0
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScalingSection {
    pub policy: Option<PolicyKind>,
    pub beta: Option<f64>,
    pub eps: Option<f64>,
    pub fallback_eps: Option<f64>,
    /// Uniform number of blocks for the block policy.
    pub blocks: Option<usize>,
    /// Explicit block sizes; overrides `blocks`.
    pub block_sizes: Option<Vec<usize>>,
    pub nb: Option<u32>,
    pub exponent: Option<ExponentRule>,
    pub alpha: Option<f64>,
    pub denominator: Option<Denominator>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepSection {
    #[serde(default)]
    pub schedule: ScheduleKind,
    pub eta: Option<f64>,
    /// Stepsize as a multiple of `1/L` for the global objective.
    pub eta_over_l: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorSection {
    pub kind: Option<EstimatorKind>,
    pub fraction: Option<f64>,
    pub refresh: Option<RefreshSpec>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum RefreshSpec {
    Named(String),
    Value(f64),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    name: Option<String>,
    algorithm: String,
    #[serde(default = "default_iterations")]
    iterations: u64,
    #[serde(default = "default_workers")]
    workers: usize,
    #[serde(default)]
    seeds: SeedSpec,
    #[serde(default = "default_width")]
    width: u8,
    #[serde(default = "default_rounding")]
    rounding: RoundingMode,
    #[serde(default)]
    transport: TransportChoice,
    /// TCP aggregator address, or "auto" for a loopback aggregator.
    address: Option<String>,
    #[serde(default = "default_timeout")]
    timeout_secs: f64,
    #[serde(default)]
    parallel_seeds: bool,
    #[serde(default)]
    track_shifts: bool,
    output_dir: Option<PathBuf>,
    cache_dir: Option<PathBuf>,
    dataset: Option<DatasetSection>,
    synthetic: Option<SyntheticSection>,
    #[serde(default)]
    scaling: ScalingSection,
    #[serde(default)]
    step: StepSection,
    #[serde(default)]
    estimator: EstimatorSection,
}

fn default_iterations() -> u64 {
    3000
}

fn default_workers() -> usize {
    12
}

fn default_width() -> u8 {
    32
}

fn default_rounding() -> RoundingMode {
    RoundingMode::Stochastic
}

fn default_timeout() -> f64 {
    30.0
}

#[derive(Debug, Clone, PartialEq)]
pub enum StepSize {
    Absolute(f64),
    OverL(f64),
}

#[derive(Debug, Clone)]
pub enum ProblemSpec {
    Dataset { path: PathBuf, lambda: f64, dim: Option<usize> },
    Synthetic(SyntheticSection),
}

/// Validated experiment description with defaults filled in.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub name: String,
    pub algorithm: Algorithm,
    pub iterations: u64,
    pub workers: usize,
    pub seeds: Vec<u64>,
    pub width: IntWidth,
    pub rounding: RoundingMode,
    pub transport: TransportChoice,
    pub address: Option<String>,
    pub timeout: Duration,
    pub parallel_seeds: bool,
    pub track_shifts: bool,
    pub output_dir: PathBuf,
    pub cache_dir: PathBuf,
    pub problem: ProblemSpec,
    /// Policy with the dimension-dependent block layout still unresolved.
    pub policy: PolicySpec,
    pub denominator: Denominator,
    pub schedule: ScheduleKind,
    pub step: StepSize,
    pub estimator: GradientEstimator,
}

/// Scaling choice before the problem dimension is known.
#[derive(Debug, Clone, PartialEq)]
pub enum PolicySpec {
    Ready(ScalingPolicy),
    Block { blocks: BlockLayout, beta: f64, eps: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub enum BlockLayout {
    Uniform(usize),
    Sizes(Vec<usize>),
}

impl PolicySpec {
    pub fn resolve(&self, d: usize) -> Result<ScalingPolicy, String> {
        match self {
            PolicySpec::Ready(p) => Ok(p.clone()),
            PolicySpec::Block { blocks, beta, eps } => {
                let partition = match blocks {
                    BlockLayout::Uniform(b) => BlockPartition::uniform(d, *b),
                    BlockLayout::Sizes(s) => BlockPartition::new(s.clone()),
                }
                .map_err(|e| format!("scaling.blocks: {e}"))?;
                partition.validate_for(d).map_err(|e| format!("scaling.block_sizes: {e}"))?;
                Ok(ScalingPolicy::BlockAdaptive { partition, beta: *beta, eps: *eps })
            }
        }
    }
}

impl ExperimentConfig {
    pub fn schedule(&self, eta: f64) -> StepSchedule {
        match self.schedule {
            ScheduleKind::Constant => StepSchedule::Constant { eta },
            ScheduleKind::InvSqrt => StepSchedule::InvSqrt { eta0: eta },
        }
    }
}

/// `lambda_2` used for the benchmark datasets when the config gives none.
pub fn default_lambda(path: &Path) -> Option<f64> {
    let stem = path.file_stem()?.to_str()?.to_ascii_lowercase();
    match stem.as_str() {
        "a5a" => Some(5e-4),
        "mushrooms" => Some(6e-4),
        "w8a" => Some(1e-4),
        "real-sim" | "real_sim" => Some(5e-5),
        _ => None,
    }
}

/// Published feature count of the benchmark datasets. A file may leave the
/// last features unused, which would otherwise shrink the inferred dimension.
pub fn default_dim(path: &Path) -> Option<usize> {
    let stem = path.file_stem()?.to_str()?.to_ascii_lowercase();
    match stem.as_str() {
        "a5a" => Some(123),
        "mushrooms" => Some(112),
        "w8a" => Some(300),
        "real-sim" | "real_sim" => Some(20958),
        _ => None,
    }
}

fn key_err(key: &str, msg: impl std::fmt::Display) -> HarnessError {
    HarnessError::Config(format!("{key}: {msg}"))
}

fn resolve_path(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig, HarnessError> {
    let text = fs::read_to_string(path).map_err(|e| HarnessError::Io { path: path.display().to_string(), source: e })?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    parse_config(&text, &base)
}

/// Parses config text; relative paths are taken relative to `base`.
pub fn parse_config(text: &str, base: &Path) -> Result<ExperimentConfig, HarnessError> {
    let raw: RawConfig = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
    let algorithm: Algorithm = raw.algorithm.trim().parse().map_err(|e| key_err("algorithm", e))?;
    if raw.iterations == 0 {
        return Err(key_err("iterations", "must be at least 1"));
    }
    if raw.workers == 0 {
        return Err(key_err("workers", "must be at least 1"));
    }
    let seeds = parse_seeds(&raw.seeds).map_err(|e| key_err("seeds", e))?;
    let width = IntWidth::try_from(raw.width).map_err(|e| key_err("width", e))?;
    if !(raw.timeout_secs > 0.0 && raw.timeout_secs.is_finite()) {
        return Err(key_err("timeout_secs", "must be > 0"));
    }

    let problem = match (raw.dataset, raw.synthetic) {
        (Some(_), Some(_)) => return Err(key_err("dataset", "give either [dataset] or [synthetic], not both")),
        (None, None) => return Err(key_err("dataset", "missing ([dataset] or [synthetic] section required)")),
        (Some(ds), None) => {
            let p = resolve_path(base, &ds.path);
            if !p.is_file() {
                return Err(key_err("dataset.path", format!("{} does not exist", p.display())));
            }
            let lambda = match ds.lambda.or_else(|| default_lambda(&p)) {
                Some(l) if l > 0.0 && l.is_finite() => l,
                Some(l) => return Err(key_err("dataset.lambda", format!("must be > 0, got {l}"))),
                None => return Err(key_err("dataset.lambda", "missing and no default for this dataset")),
            };
            let dim = ds.dim.or_else(|| default_dim(&p));
            ProblemSpec::Dataset { path: p, lambda, dim }
        }
        (None, Some(s)) => {
            if s.dim == 0 {
                return Err(key_err("synthetic.dim", "must be at least 1"));
            }
            ProblemSpec::Synthetic(s)
        }
    };

    let sc = raw.scaling;
    let beta = sc.beta.unwrap_or(ScalingPolicy::DEFAULT_BETA);
    let eps = sc.eps.unwrap_or(ScalingPolicy::DEFAULT_EPS);
    let policy = match sc.policy.unwrap_or(algorithm.default_policy()) {
        PolicyKind::MovingAverage => PolicySpec::Ready(ScalingPolicy::MovingAverage { beta, eps }),
        PolicyKind::Adaptive => PolicySpec::Ready(ScalingPolicy::Adaptive { fallback_eps: sc.fallback_eps }),
        PolicyKind::Block => PolicySpec::Block {
            blocks: match (sc.block_sizes, sc.blocks) {
                (Some(s), _) => BlockLayout::Sizes(s),
                (None, Some(b)) => BlockLayout::Uniform(b),
                (None, None) => return Err(key_err("scaling.blocks", "required for the block policy")),
            },
            beta,
            eps,
        },
        PolicyKind::Heuristic => PolicySpec::Ready(ScalingPolicy::Heuristic {
            nb: sc.nb.unwrap_or(width.bits() as u32),
            rule: sc.exponent.unwrap_or_default(),
        }),
        PolicyKind::Fixed => PolicySpec::Ready(ScalingPolicy::Fixed {
            alpha: sc.alpha.ok_or_else(|| key_err("scaling.alpha", "required for the fixed policy"))?,
        }),
        PolicyKind::Exact => PolicySpec::Ready(ScalingPolicy::Exact),
    };
    if let PolicySpec::Ready(p) = &policy {
        // Dimension-free checks; the block layout is checked once d is known.
        p.validate(usize::MAX).map_err(|e| key_err("scaling", e))?;
    } else if !(0.0..1.0).contains(&beta) {
        return Err(key_err("scaling.beta", format!("must lie in [0, 1), got {beta}")));
    }
    if algorithm == Algorithm::Sgd && policy != PolicySpec::Ready(ScalingPolicy::Exact) {
        return Err(key_err("scaling.policy", "sgd is uncompressed; use intsgd for a compressed run"));
    }

    let step = match (raw.step.eta, raw.step.eta_over_l) {
        (Some(e), None) if e > 0.0 && e.is_finite() => StepSize::Absolute(e),
        (None, Some(c)) if c > 0.0 && c.is_finite() => StepSize::OverL(c),
        (Some(_), Some(_)) => return Err(key_err("step.eta", "give either eta or eta_over_l")),
        (None, None) => return Err(key_err("step.eta", "missing (eta or eta_over_l required)")),
        _ => return Err(key_err("step.eta", "must be > 0")),
    };

    let est = raw.estimator;
    let fraction = est.fraction.unwrap_or(GradientEstimator::DEFAULT_FRACTION);
    let estimator = match est.kind.unwrap_or(algorithm.default_estimator()) {
        EstimatorKind::Full => GradientEstimator::FullGrad,
        EstimatorKind::Minibatch => GradientEstimator::MiniBatch { fraction },
        EstimatorKind::Lsvrg => GradientEstimator::LSvrg {
            fraction,
            refresh: match est.refresh {
                None => RefreshProbability::OneOverM,
                Some(RefreshSpec::Value(p)) => RefreshProbability::Value(p),
                Some(RefreshSpec::Named(s)) => match s.as_str() {
                    "one_over_m" => RefreshProbability::OneOverM,
                    "batch_over_m" => RefreshProbability::BatchOverM,
                    other => return Err(key_err("estimator.refresh", format!("unknown value {other:?}"))),
                },
            },
        },
    };
    estimator.validate().map_err(|e| key_err("estimator", e))?;

    let name = raw.name.unwrap_or_else(|| algorithm.name().to_string());
    let output_dir = resolve_path(base, &raw.output_dir.unwrap_or_else(|| PathBuf::from("results").join(&name)));
    let cache_dir = match (std::env::var_os(CACHE_DIR_ENV), raw.cache_dir) {
        (Some(env), _) => PathBuf::from(env),
        (None, Some(c)) => resolve_path(base, &c),
        (None, None) => resolve_path(base, Path::new(".intsgd-cache")),
    };
    let address = match (raw.transport, raw.address) {
        (TransportChoice::Tcp, Some(a)) if a != "auto" => Some(a),
        (TransportChoice::InProcess, Some(_)) => return Err(key_err("address", "only used with transport = \"tcp\"")),
        _ => None,
    };

    Ok(ExperimentConfig {
        name,
        algorithm,
        iterations: raw.iterations,
        workers: raw.workers,
        seeds,
        width,
        rounding: raw.rounding,
        transport: raw.transport,
        address,
        timeout: Duration::from_secs_f64(raw.timeout_secs),
        parallel_seeds: raw.parallel_seeds,
        track_shifts: raw.track_shifts,
        output_dir,
        cache_dir,
        problem,
        policy,
        denominator: sc.denominator.unwrap_or_default(),
        schedule: raw.step.schedule,
        step,
        estimator,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const SYN: &str = "[synthetic]\nkind = \"quadratic\"\ndim = 3\n[step]\neta = 0.1\n";

    fn parse(extra: &str) -> Result<ExperimentConfig, HarnessError> {
        parse_config(&format!("{extra}\n{SYN}"), Path::new("."))
    }

    #[test]
    fn empty_algorithm_names_key() {
        let e = parse("algorithm = \"\"").unwrap_err().to_string();
        assert!(e.contains("algorithm"), "{e}");
        let e = parse_config(SYN, Path::new(".")).unwrap_err().to_string();
        assert!(e.contains("algorithm"), "{e}");
    }

    #[test]
    fn defaults_filled() {
        let c = parse("algorithm = \"intsgd\"").unwrap();
        assert_eq!(c.policy, PolicySpec::Ready(ScalingPolicy::MovingAverage { beta: 0.9, eps: 1e-8 }));
        assert_eq!(c.iterations, 3000);
        assert_eq!(c.workers, 12);
        assert_eq!(c.width, IntWidth::W32);
        assert_eq!(c.estimator, GradientEstimator::MiniBatch { fraction: 0.05 });
        let c = parse("algorithm = \"intdiana_gd\"").unwrap();
        assert_eq!(c.policy, PolicySpec::Ready(ScalingPolicy::Adaptive { fallback_eps: None }));
        assert_eq!(c.estimator, GradientEstimator::FullGrad);
    }

    #[test]
    fn seed_ranges() {
        assert_eq!(parse_seeds(&SeedSpec::Range("0..19".into())).unwrap().len(), 20);
        assert_eq!(parse_seeds(&SeedSpec::Range("3..=4".into())).unwrap(), vec![3, 4]);
        assert_eq!(parse_seeds(&SeedSpec::List(vec![5, 1])).unwrap(), vec![5, 1]);
        assert!(parse_seeds(&SeedSpec::Range("4..3".into())).is_err());
        let c = parse("algorithm = \"sgd\"\nseeds = \"0..19\"").unwrap();
        assert_eq!(c.seeds, (0..20).collect::<Vec<_>>());
    }

    #[test]
    fn unknown_and_mistyped_keys() {
        let e = parse("algorithm = \"sgd\"\nbogus = 1").unwrap_err().to_string();
        assert!(e.contains("bogus"), "{e}");
        let e = parse("algorithm = \"sgd\"\nworkers = \"four\"").unwrap_err().to_string();
        assert!(e.contains("workers"), "{e}");
        let e = parse("algorithm = \"sgd\"\nwidth = 16").unwrap_err().to_string();
        assert!(e.contains("width"), "{e}");
    }

    #[test]
    fn missing_dataset_file() {
        let text = "algorithm = \"sgd\"\n[dataset]\npath = \"/nonexistent/mushrooms\"\n[step]\neta = 1.0\n";
        let e = parse_config(text, Path::new(".")).unwrap_err().to_string();
        assert!(e.contains("dataset.path"), "{e}");
    }

    #[test]
    fn lambda_defaults_by_name() {
        assert_eq!(default_lambda(Path::new("data/a5a")), Some(5e-4));
        assert_eq!(default_lambda(Path::new("x/mushrooms")), Some(6e-4));
        assert_eq!(default_lambda(Path::new("w8a.txt")), Some(1e-4));
        assert_eq!(default_lambda(Path::new("other")), None);
        assert_eq!(default_dim(Path::new("data/a5a")), Some(123));
        assert_eq!(default_dim(Path::new("other")), None);
    }

    #[test]
    fn block_policy_resolves_with_dimension() {
        let c = parse("algorithm = \"intsgd_block\"\n[scaling]\nblocks = 2").unwrap();
        match c.policy.resolve(5).unwrap() {
            ScalingPolicy::BlockAdaptive { partition, .. } => assert_eq!(partition.sizes(), &[3, 2]),
            other => panic!("{other:?}"),
        }
        assert!(parse("algorithm = \"intsgd_block\"").is_err());
    }
}
