//! `latentflow` command-line driver.
//!
//! Exit codes: 0 success, 1 validation, 2 divergence, 3 I/O.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use config::{Command, Origin, RunSpec, Setting};
use error::{CliError, CliResult};

/// Environment variable that caps the worker-thread count.
const THREADS_ENV: &str = "LATENTFLOW_THREADS";
/// Test hook: when set to 1, the tanh backward rule is deliberately wrong.
const CORRUPT_ENV: &str = "LATENTFLOW_CORRUPT_TANH_BACKWARD";

#[derive(Debug, Parser)]
#[command(name = "latentflow", version, about = "Train and evaluate deep latent-variable models")]
struct Cli {
    #[arg(value_enum)]
    command: Command,
    /// Flat key=value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<String>,
    /// Training checkpoint to continue from.
    #[arg(long)]
    resume: Option<String>,
    /// Model checkpoint for evaluation commands.
    #[arg(long)]
    checkpoint: Option<String>,
    /// Importance samples per datapoint.
    #[arg(long = "L")]
    l: Option<String>,
    /// diag | fullcov | planar | iaf
    #[arg(long)]
    posterior: Option<String>,
    #[arg(long)]
    iaf_steps: Option<String>,
    #[arg(long)]
    free_bits: Option<String>,
    #[arg(long)]
    anneal_steps: Option<String>,
    #[arg(long)]
    steps: Option<String>,
    /// toy4 | lingauss | idx:PATH
    #[arg(long)]
    dataset: Option<String>,
    /// Sample count for `sample` and `compare-estimators`.
    #[arg(long)]
    samples: Option<String>,
    /// Any configuration key, as KEY=VALUE. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Print machine-readable JSON instead of text.
    #[arg(long)]
    json: bool,
}

fn build_spec(cli: &Cli) -> CliResult<RunSpec> {
    let mut spec = RunSpec::new(cli.command);
    if let Some(path) = &cli.config {
        spec.apply_file(path)?;
    }
    let seed = cli.seed.map(|s| s.to_string());
    let flags: [(&str, &str, Option<&String>); 11] = [
        ("--seed", "seed", seed.as_ref()),
        ("--out", "out", cli.out.as_ref()),
        ("--resume", "resume", cli.resume.as_ref()),
        ("--checkpoint", "checkpoint", cli.checkpoint.as_ref()),
        ("--L", "iwae_samples", cli.l.as_ref()),
        ("--posterior", "posterior", cli.posterior.as_ref()),
        ("--iaf-steps", "iaf_steps", cli.iaf_steps.as_ref()),
        ("--free-bits", "free_bits", cli.free_bits.as_ref()),
        ("--anneal-steps", "anneal_steps", cli.anneal_steps.as_ref()),
        ("--steps", "steps", cli.steps.as_ref()),
        ("--dataset", "dataset", cli.dataset.as_ref()),
    ];
    for (flag, key, value) in flags {
        if let Some(v) = value {
            spec.apply(Setting {
                key: key.into(),
                value: v.clone(),
                origin: Origin::Flag(flag.into()),
            })?;
        }
    }
    if let Some(v) = &cli.samples {
        spec.apply(Setting {
            key: "samples".into(),
            value: v.clone(),
            origin: Origin::Flag("--samples".into()),
        })?;
    }
    for kv in &cli.set {
        let Some((k, v)) = kv.split_once('=') else {
            return Err(CliError::Validation(format!("--set: expected KEY=VALUE, got `{kv}`")));
        };
        spec.apply(Setting {
            key: k.trim().into(),
            value: v.trim().into(),
            origin: Origin::Flag(format!("--set {}", k.trim())),
        })?;
    }
    spec.json = cli.json;
    spec.finish()?;
    Ok(spec)
}

fn configure_threads() -> CliResult<()> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n >= 1)
        .ok_or_else(|| CliError::Validation(format!("{THREADS_ENV} must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Validation(format!("{THREADS_ENV}: {e}")))
}

fn run(cli: &Cli) -> CliResult<()> {
    configure_threads()?;
    if std::env::var(CORRUPT_ENV).is_ok_and(|v| v == "1") {
        latentflow::tape::set_corrupt_tanh_backward(true);
    }
    let spec = build_spec(cli)?;
    commands::run(&spec)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
