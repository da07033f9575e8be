//! Experiment configuration, metrics files and plots.

mod config;
mod plot;
mod run;

use thiserror::Error;

pub use config::{
    default_dim, default_lambda, load_config, parse_config, parse_seeds, Algorithm, BlockLayout, ExperimentConfig, PolicySpec,
    ProblemSpec, ScheduleKind, SeedSpec, StepSize, SyntheticKind, SyntheticSection, TransportChoice, CACHE_DIR_ENV,
};
pub use plot::{emit_plots, plot_columns, render, PlotSpec};
pub use run::{
    build_problems, read_metrics_csv, run_experiment, summarize, write_summary, ExperimentReport, ProblemSet,
    SeedOutcome, SummaryRow, SUMMARY_METRICS,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("csv {path}: {message}")]
    Csv { path: String, message: String },
    #[error("missing column {0:?}")]
    MissingColumn(String),
    #[error("plot: {0}")]
    Plot(String),
    #[error(transparent)]
    Problem(#[from] crate::problems::ProblemError),
    #[error(transparent)]
    Optim(#[from] crate::optimizers::OptimError),
}
