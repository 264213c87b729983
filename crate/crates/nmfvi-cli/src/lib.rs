//! Command-line front end: configuration ingestion, subcommand dispatch, and
//! result persistence.
//!
//! Subcommands: `check-convexity`, `solve`, `predict`, `simulate`,
//! `compare`, `sweep`. Common flags: `--config PATH` (required),
//! `--out PATH` (default stdout; `sweep` writes its chart next to it),
//! `--seed N` (overrides the simulation and Monte Carlo seeds),
//! `--threads N` (0 = all cores; `NMF_THREADS` is the fallback).
//!
//! Exit codes: 0 ok, 1 not-certified or assertion failure, 2 config error,
//! 3 fixed-point non-convergence.

pub mod commands;
pub mod config;
mod svg;

use clap::{Parser, Subcommand};
use commands::{CommandResult, Output};
use config::RunConfig;
use std::path::{Path, PathBuf};

#[derive(Parser, Debug)]
#[command(
    name = "nmfvi",
    version,
    about = "Mean-field asymptotics for linear regression"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
    /// Run configuration file (flat [section] key=value format).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output path (stdout when omitted).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides the simulation and Monte Carlo seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (0 = all cores). Falls back to NMF_THREADS.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Certify strong convexity of the effective penalty.
    CheckConvexity,
    /// Solve the scalar fixed-point system for (b*, tau*).
    Solve,
    /// Turn the solved fixed point into asymptotic predictions.
    Predict,
    /// Run synthetic-data replicates and report empirical metrics.
    Simulate,
    /// Side-by-side predicted vs empirical report.
    Compare,
    /// Sweep one hyperparameter axis; emits CSV plus an SVG chart.
    Sweep,
}

pub fn run<I>(args: I) -> i32
where
    I: IntoIterator<Item = String>,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // Help/version requests are successful exits.
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };

    let threads = cli.threads.or_else(|| {
        std::env::var("NMF_THREADS")
            .ok()
            .and_then(|v| v.parse::<usize>().ok())
    });
    if let Some(t) = threads {
        nmfvi::par::configure_global_threads(t);
    }

    let Some(config_path) = cli.config.as_deref() else {
        eprintln!("config error: --config PATH is required");
        return 2;
    };
    let text = match std::fs::read_to_string(config_path) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("config error: cannot read {}: {e}", config_path.display());
            return 2;
        }
    };
    let mut cfg = match RunConfig::from_ini_str(&text) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("{e}");
            return 2;
        }
    };
    if let Some(seed) = cli.seed {
        cfg.sim.seed = seed;
        cfg.quad.seed = seed;
    }

    let result = match cli.command {
        Cmd::CheckConvexity => commands::check_convexity(&cfg),
        Cmd::Solve => commands::solve(&cfg),
        Cmd::Predict => commands::predict(&cfg),
        Cmd::Simulate => commands::simulate_cmd(&cfg),
        Cmd::Compare => commands::compare(&cfg),
        Cmd::Sweep => commands::sweep(&cfg),
    };
    emit(result, cli.out.as_deref())
}

fn emit(result: CommandResult, out: Option<&Path>) -> i32 {
    let payload = match &result.output {
        Output::Json(value) => {
            let mut s = serde_json::to_string_pretty(value).expect("json serializes");
            s.push('\n');
            s
        }
        Output::Csv(text) => text.clone(),
    };
    match out {
        Some(path) => {
            if let Err(e) = std::fs::write(path, payload) {
                eprintln!("cannot write {}: {e}", path.display());
                return 1;
            }
        }
        None => print!("{payload}"),
    }
    if let Some(chart) = &result.svg {
        let svg_path = match out {
            Some(path) => {
                let mut p = path.to_path_buf();
                p.set_extension("svg");
                p
            }
            None => PathBuf::from("sweep.svg"),
        };
        if let Err(e) = std::fs::write(&svg_path, chart) {
            eprintln!("cannot write {}: {e}", svg_path.display());
            return 1;
        }
    }
    result.exit_code
}
