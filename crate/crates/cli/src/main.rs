//! `nsgp` command-line interface.

mod commands;
mod config;
mod error;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use config::RunConfig;
use error::CliError;

#[derive(Parser)]
#[command(name = "nsgp", version, about = "Non-stationary Gaussian process regression")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed (overrides the config's `seed`).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, created if missing.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Worker threads for the data-parallel kernels.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a model; writes fit.json and trace.csv.
    Fit(Common),
    /// Predict at new inputs; writes predictions.csv.
    Predict(Common),
    /// Score a fit on held-out data; writes metrics.json.
    Evaluate(Common),
    /// Draw functions from a kernel prior; writes prior_draws.csv.
    SamplePrior(Common),
    /// Generate a synthetic benchmark; writes synth.csv.
    Synth(Common),
    /// Compare stationary and Gibbs models over repeated splits; writes bench.json.
    Bench {
        #[command(flatten)]
        common: Common,
        /// spatial, temporal or spatiotemporal.
        #[arg(long)]
        suite: Option<String>,
    },
}

fn unix_seconds() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

fn run(cli: Cli) -> Result<(), CliError> {
    let (name, common, suite) = match &cli.command {
        Command::Fit(c) => ("fit", c, None),
        Command::Predict(c) => ("predict", c, None),
        Command::Evaluate(c) => ("evaluate", c, None),
        Command::SamplePrior(c) => ("sample-prior", c, None),
        Command::Synth(c) => ("synth", c, None),
        Command::Bench { common, suite } => ("bench", common, suite.as_deref()),
    };
    if let Some(n) = common.threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be at least 1".into()));
        }
        nsgp::par::set_threads(n).map_err(CliError::Config)?;
    }
    let cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None if matches!(cli.command, Command::Synth(_) | Command::Bench { .. }) => RunConfig::default(),
        None => return Err(CliError::Config(format!("{name} needs --config"))),
    };
    let seed = common
        .seed
        .or(cfg.seed)
        .ok_or_else(|| CliError::Config("a seed is required (--seed or config `seed`)".into()))?;
    let out: &Path = &common.out;
    std::fs::create_dir_all(out)?;
    let started = unix_seconds();
    let clock = Instant::now();
    let mut extra = serde_json::Map::new();
    match &cli.command {
        Command::Fit(_) => {
            let r = commands::fit(&cfg, seed, out)?;
            extra.insert("optimizer_seconds".into(), json!(r.fit.trace.wall_time));
            println!(
                "fit {} rows, {} iterations, objective {:.6}; wrote {}",
                r.rows,
                r.fit.trace.objective_per_iter.len(),
                r.fit.final_objective,
                out.join("fit.json").display()
            );
        }
        Command::Predict(_) => {
            let n = commands::predict(&cfg, out)?;
            println!("predicted {n} rows; wrote {}", out.join("predictions.csv").display());
        }
        Command::Evaluate(_) => {
            let r = commands::evaluate(&cfg, seed, out)?;
            println!(
                "n {} rmse {:.6} nlpd {:.6}; wrote {}",
                r.metrics.overall.n,
                r.metrics.overall.rmse,
                r.metrics.overall.nlpd,
                out.join("metrics.json").display()
            );
        }
        Command::SamplePrior(_) => {
            let n = commands::sample_prior(&cfg, seed, out)?;
            println!("{n} draws; wrote {}", out.join("prior_draws.csv").display());
        }
        Command::Synth(_) => {
            let n = commands::synth(&cfg, seed, out)?;
            println!("{n} rows; wrote {}", out.join("synth.csv").display());
        }
        Command::Bench { .. } => {
            let table = commands::bench(&cfg, suite, seed, out)?;
            commands::render_table(&table, &mut std::io::stdout())?;
        }
    }
    let mut meta = serde_json::Map::new();
    meta.insert("command".into(), json!(name));
    meta.insert("seed".into(), json!(seed));
    meta.insert("started_unix_seconds".into(), json!(started));
    meta.insert("elapsed_seconds".into(), json!(clock.elapsed().as_secs_f64()));
    meta.insert("threads".into(), json!(common.threads));
    meta.insert("parallel".into(), json!(nsgp::par::is_parallel()));
    meta.insert("version".into(), json!(env!("CARGO_PKG_VERSION")));
    meta.extend(extra);
    commands::write_json(&out.join("run_meta.json"), &meta)?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
