//! `flowproc` experiment harness.
//!
//! ```text
//! flowproc <command> --config <path> [--seed N] [--replicates N] [--out DIR]
//! ```
//!
//! Exit status: 0 success, 2 a built-in check failed, 1 any error. Reports
//! are written atomically, so a failed run leaves no files behind.

pub mod checks;
mod commands;
pub mod config;
pub mod report;

use std::ffi::OsString;
use std::path::PathBuf;
use std::time::Instant;

use clap::Parser;
use flowproc_core::par::{configure_threads, Execution};

pub use commands::Outcome;
pub use config::{Command, ExperimentConfig, Overrides};

pub const THREADS_ENV: &str = "FLOWPROC_THREADS";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] flowproc_core::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Parser)]
#[command(name = "flowproc", version, about = "Superprocess-in-a-stochastic-flow experiments")]
struct Args {
    /// particles | snake | spde | loglaplace | duality | verify-all
    command: String,
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    replicates: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Parses `FLOWPROC_THREADS`; `None` when unset.
fn thread_cap(value: Option<OsString>) -> Result<Option<usize>, CliError> {
    let Some(v) = value else { return Ok(None) };
    let s = v.to_string_lossy();
    match s.trim().parse::<usize>() {
        Ok(n) if n > 0 => Ok(Some(n)),
        _ => Err(CliError::Config(format!("{THREADS_ENV} must be a positive integer, got `{s}`"))),
    }
}

/// Runs one experiment end to end and writes its report.
pub fn run_experiment(
    command: Command,
    config: ExperimentConfig,
    overrides: &Overrides,
) -> Result<(Outcome, Vec<PathBuf>), CliError> {
    let start = Instant::now();
    let resolved = config::resolve(command, config, overrides)?;
    let outcome = commands::execute(&resolved, overrides, Execution::Parallel)?;
    let summary = report::Summary {
        schema_version: report::SCHEMA_VERSION,
        command: format!("{command:?}"),
        seed: resolved.config.mc.seed,
        replicates: resolved.config.mc.replicates,
        status: if outcome.passed() { "pass" } else { "fail" },
        wall_time_seconds: start.elapsed().as_secs_f64(),
        tables: outcome.tables.iter().map(|t| format!("{}.csv", t.name)).collect(),
        estimates: outcome.estimates.clone(),
        checks: outcome.checks.clone(),
        notes: outcome.notes.clone(),
        config: serde_json::to_value(&resolved.config)?,
    };
    let files = report::write_report(&resolved.config.output.dir, &outcome.tables, &summary)?;
    Ok((outcome, files))
}

fn try_main(args: Vec<OsString>) -> Result<bool, CliError> {
    let args = match Args::try_parse_from(args) {
        Ok(a) => a,
        Err(e) if !e.use_stderr() => {
            // --help / --version
            print!("{e}");
            return Ok(true);
        }
        Err(e) => return Err(CliError::Config(e.to_string())),
    };
    let command = Command::parse(&args.command)?;
    if let Some(n) = thread_cap(std::env::var_os(THREADS_ENV))? {
        configure_threads(n);
    }
    let text = std::fs::read_to_string(&args.config)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", args.config.display())))?;
    let config = config::parse(&text)?;
    let overrides = Overrides {
        seed: args.seed,
        replicates: args.replicates,
        out: args.out,
    };
    let (outcome, files) = run_experiment(command, config, &overrides)?;
    for c in outcome.checks.iter().filter(|c| !c.pass) {
        eprintln!("check failed: {} = {} (target {} ± {})", c.name, c.value, c.target, c.tolerance);
    }
    for f in files {
        println!("{}", f.display());
    }
    Ok(outcome.passed())
}

/// Process entry point; returns the exit status.
pub fn main_with_args(args: Vec<OsString>) -> i32 {
    match try_main(args) {
        Ok(true) => 0,
        Ok(false) => 2,
        Err(e) => {
            eprintln!("flowproc: {e}");
            1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn thread_cap_parsing() {
        assert_eq!(thread_cap(None).unwrap(), None);
        assert_eq!(thread_cap(Some("3".into())).unwrap(), Some(3));
        assert!(thread_cap(Some("0".into())).is_err());
        assert!(thread_cap(Some("many".into())).is_err());
    }
}
