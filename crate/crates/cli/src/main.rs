use std::net::TcpListener;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use log::{error, info};

use intsgd::aggregation::serve_session;
use intsgd::harness::{self, emit_plots, load_config, parse_seeds, plot_columns, SeedSpec, CACHE_DIR_ENV};
use intsgd::problems::{
    load_libsvm, logistic_smoothness, partition_heterogeneous, reference_optimum, LogRegProblem, Shard,
    SolverOptions,
};
use intsgd::rounding::IntWidth;

#[derive(Parser)]
#[command(name = "intsgd", version, about = "Integer-compressed distributed optimization experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment described by a TOML config.
    Run {
        config: PathBuf,
        /// Override the output directory.
        #[arg(long)]
        output_dir: Option<PathBuf>,
        /// Override the iteration budget.
        #[arg(long)]
        iterations: Option<u64>,
        /// Override the seeds, e.g. "0..19" or "3".
        #[arg(long)]
        seeds: Option<String>,
        /// Run seeds in parallel.
        #[arg(long)]
        parallel: bool,
    },
    /// Compute (or load) the cached reference optimum of a LibSVM dataset.
    Optimum {
        dataset: PathBuf,
        lambda: f64,
        /// Only the rows a run with this many workers would use.
        #[arg(long, default_value_t = 1)]
        workers: usize,
        #[arg(long, env = CACHE_DIR_ENV, default_value = ".intsgd-cache")]
        cache_dir: PathBuf,
    },
    /// Plot summary CSVs as SVG files.
    Plot {
        #[arg(required = true)]
        summaries: Vec<PathBuf>,
        #[arg(long, default_value = "plots")]
        out: PathBuf,
        /// Columns to plot; defaults to the objective gap and max integer.
        #[arg(long = "column")]
        columns: Vec<String>,
    },
    /// Serve integer all-reduce sessions over TCP.
    Aggregator {
        #[arg(long, env = "INTSGD_LISTEN")]
        listen: String,
        #[arg(long)]
        workers: usize,
        #[arg(long, default_value_t = 32)]
        width: u8,
        /// Seconds to wait for connections and for each round.
        #[arg(long, default_value_t = 300.0)]
        timeout: f64,
        /// Stop after this many sessions; serve forever when omitted.
        #[arg(long)]
        sessions: Option<u64>,
    },
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Run { config, output_dir, iterations, seeds, parallel } => {
            let mut cfg = load_config(&config).with_context(|| format!("loading {}", config.display()))?;
            if let Some(d) = output_dir {
                cfg.output_dir = d;
            }
            if let Some(k) = iterations {
                if k == 0 {
                    bail!("--iterations must be at least 1");
                }
                cfg.iterations = k;
            }
            if let Some(s) = seeds {
                cfg.seeds = parse_seeds(&SeedSpec::Range(s)).map_err(anyhow::Error::msg).context("--seeds")?;
            }
            cfg.parallel_seeds |= parallel;
            let report = harness::run_experiment(&cfg)?;
            for s in &report.seeds {
                match (&s.error, s.records.last()) {
                    (Some(e), _) => error!("seed {} failed: {e}", s.seed),
                    (None, Some(last)) => info!(
                        "seed {}: k = {} objective {:.10e} gap {:?} max_int {}",
                        s.seed, last.iteration, last.objective, last.gap, last.max_int
                    ),
                    (None, None) => {}
                }
            }
            println!("{}", report.summary.display());
            let clean = report.failures().next().is_none();
            Ok(clean)
        }
        Command::Optimum { dataset, lambda, workers, cache_dir } => {
            let data = Arc::new(load_libsvm(&dataset, harness::default_dim(&dataset))?);
            let used = partition_heterogeneous(&data, workers)?.last().map_or(0, |s| s.rows.end);
            let whole = LogRegProblem::new(Shard { worker_id: 0, data: Arc::clone(&data), rows: 0..used }, lambda)?;
            let opt = reference_optimum(&whole, &data.content_hash(used), lambda, Some(&cache_dir), &SolverOptions::default())?;
            println!("rows           {used}");
            println!("f*             {:.17e}", opt.f);
            println!("|grad f|^2     {:.3e}", opt.grad_norm_sq);
            println!("iterations     {}", opt.iterations);
            println!("L (estimate)   {:.6}", logistic_smoothness(&data, 0..used, lambda, 200));
            Ok(true)
        }
        Command::Plot { summaries, out, columns } => {
            let columns = if columns.is_empty() { plot_columns() } else { columns };
            for p in emit_plots(&summaries, &out, &columns)? {
                println!("{}", p.display());
            }
            Ok(true)
        }
        Command::Aggregator { listen, workers, width, timeout, sessions } => {
            let width = IntWidth::try_from(width).map_err(anyhow::Error::msg)?;
            if !(timeout > 0.0 && timeout.is_finite()) {
                bail!("--timeout must be positive");
            }
            let listener = TcpListener::bind(&listen).with_context(|| format!("binding {listen}"))?;
            println!("listening on {}", listener.local_addr()?);
            let mut served = 0u64;
            let mut ok = true;
            while sessions.is_none_or(|s| served < s) {
                match serve_session(&listener, workers, width, Duration::from_secs_f64(timeout)) {
                    Ok(stats) => info!("session {served}: {} rounds", stats.rounds),
                    Err(e) => {
                        error!("session {served}: {e}");
                        ok = false;
                    }
                }
                served += 1;
            }
            Ok(ok)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
