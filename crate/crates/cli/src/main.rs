//! `stepcascade`: simulations, sweeps, calibration studies and live
//! endpoint benchmarks for confidence-gated step speculation.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 invalid configuration,
//! 3 backend failure.

mod bench;
mod calibrate;
mod config;
mod error;
mod report;
mod simulate;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tracing_subscriber::EnvFilter;

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};
use crate::report::{now_rfc3339, run_id, write_json, RunManifest, MANIFEST_FILE, REPORT_SCHEMA_VERSION};

#[derive(Parser)]
#[command(name = "stepcascade", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run sweeps over the simulated reasoning world.
    Simulate(RunArgs),
    /// Reliability reports for draft verifier profiles.
    Calibrate(RunArgs),
    /// Run against live draft and target endpoints.
    Bench(RunArgs),
    /// Re-render summaries of a stored run from its manifest and traces.
    Report {
        /// Directory holding manifest.json.
        run_dir: PathBuf,
        /// Where to write; defaults to the run directory.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

#[derive(Args)]
struct RunArgs {
    /// TOML experiment file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config value, e.g. `--set run.gamma=0.95`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Seed for the simulated world and the engine.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
    /// Worker threads; defaults to the number of CPUs.
    #[arg(long)]
    workers: Option<usize>,
}

fn execute(command: &str, args: RunArgs) -> CliResult<()> {
    let cfg = ExperimentConfig::load(args.config.as_deref(), &args.overrides, args.seed)?;
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(w) = args.workers {
        if w == 0 {
            return Err(CliError::Config("--workers must be positive".into()));
        }
        pool = pool.num_threads(w);
    }
    let pool = pool.build().map_err(anyhow::Error::from)?;
    std::fs::create_dir_all(&args.out_dir)?;
    let id = run_id(command, &cfg);
    let started_at = now_rfc3339();
    let outputs = match command {
        "simulate" => simulate::run(&cfg, &args.out_dir, &pool, &id)?,
        "calibrate" => calibrate::run(&cfg, &args.out_dir, &pool)?,
        "bench" => bench::run(&cfg, &args.out_dir, &pool, &id)?,
        _ => unreachable!("clap restricts commands"),
    };
    let manifest = RunManifest {
        schema_version: REPORT_SCHEMA_VERSION,
        run_id: id,
        command: command.to_owned(),
        tool_version: env!("CARGO_PKG_VERSION").to_owned(),
        config: cfg,
        started_at,
        finished_at: now_rfc3339(),
        outputs,
    };
    write_json(&args.out_dir.join(MANIFEST_FILE), &manifest)?;
    print_outputs(&args.out_dir, &manifest.outputs);
    Ok(())
}

fn print_outputs(dir: &Path, outputs: &[PathBuf]) {
    for o in outputs {
        println!("{}", dir.join(o).display());
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("warn")))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(a) => execute("simulate", a),
        Command::Calibrate(a) => execute("calibrate", a),
        Command::Bench(a) => execute("bench", a),
        Command::Report { run_dir, out_dir } => {
            let out = out_dir.unwrap_or_else(|| run_dir.clone());
            report::rerender(&run_dir, &out).map(|outputs| print_outputs(&out, &outputs))
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("stepcascade: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
