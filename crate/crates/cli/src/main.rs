//! `hetfx` — heterogeneous treatment-effect pipeline for clustered designs.
//!
//! Every subcommand is driven by one TOML config file (see `configs/` for
//! samples) and writes its outputs, a deterministic `manifest.json`, and a
//! `run.log` timing sidecar into `--out-dir`.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use hetfx::config::PipelineConfig;
use hetfx::error::CliResult;
use hetfx::pipeline::{
    run_blp, run_clan, run_diagnose, run_mincer, run_pipeline, run_report, run_simulate,
    run_train, RunReport,
};

#[derive(Parser)]
#[command(
    name = "hetfx",
    version,
    about = "Honest causal forests, effect projections, and diagnostics for \
             clustered observational designs"
)]
struct Cli {
    /// Cap on worker threads (default: all cores; HETFX_THREADS as fallback).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// TOML configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Directory for outputs (created if missing).
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct ModelArgs {
    /// Persisted forest from `train` (model.jsonl).
    #[arg(long)]
    model: PathBuf,
    /// Centered residuals from `train` (residuals.csv).
    #[arg(long)]
    residuals: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic frame, wage panel, and ground-truth table.
    Simulate(CommonArgs),
    /// Prepare the data, center outcome and treatment, fit the causal
    /// forest, and persist it with its residuals.
    Train(CommonArgs),
    /// Propensity histogram, confounding-bias diagnostic, and calibration
    /// test for a trained forest.
    Diagnose {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Best linear projection of the fitted effects on covariates.
    Blp {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Covariate profiles across quartiles of the fitted effects.
    Clan {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Estimate worker ability fixed effects from the wage panel.
    Mincer(CommonArgs),
    /// Correlation matrix and optional column histogram of the prepared
    /// frame.
    Report(CommonArgs),
    /// The full run: train, diagnostics, BLP with calibration rows, CLAN,
    /// per-row estimates, and figures.
    Pipeline(CommonArgs),
}

fn thread_cap(flag: Option<usize>) -> Option<usize> {
    flag.or_else(|| {
        std::env::var("HETFX_THREADS")
            .ok()
            .and_then(|v| v.parse().ok())
    })
}

fn dispatch(cli: Cli) -> CliResult<RunReport> {
    if let Some(threads) = thread_cap(cli.threads) {
        // A second build_global in one process is an error; the cap still
        // applies through the first builder, so later calls can ignore it.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads.max(1))
            .build_global();
    }
    match &cli.command {
        Command::Simulate(args) => {
            let (config, text) = PipelineConfig::load(&args.config)?;
            run_simulate(&config, &text, &args.out_dir)
        }
        Command::Train(args) => {
            let (config, text) = PipelineConfig::load(&args.config)?;
            run_train(&config, &text, &args.out_dir)
        }
        Command::Diagnose { common, model } => {
            let (config, text) = PipelineConfig::load(&common.config)?;
            run_diagnose(&config, &text, &model.model, &model.residuals, &common.out_dir)
        }
        Command::Blp { common, model } => {
            let (config, text) = PipelineConfig::load(&common.config)?;
            run_blp(&config, &text, &model.model, &model.residuals, &common.out_dir)
        }
        Command::Clan { common, model } => {
            let (config, text) = PipelineConfig::load(&common.config)?;
            run_clan(&config, &text, &model.model, &model.residuals, &common.out_dir)
        }
        Command::Mincer(args) => {
            let (config, text) = PipelineConfig::load(&args.config)?;
            run_mincer(&config, &text, &args.out_dir)
        }
        Command::Report(args) => {
            let (config, text) = PipelineConfig::load(&args.config)?;
            run_report(&config, &text, &args.out_dir)
        }
        Command::Pipeline(args) => {
            let (config, text) = PipelineConfig::load(&args.config)?;
            run_pipeline(&config, &text, &args.out_dir)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(report) => {
            for line in report.lines {
                println!("{line}");
            }
            ExitCode::SUCCESS
        }
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code())
        }
    }
}
