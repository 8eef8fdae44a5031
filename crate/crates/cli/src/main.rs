//! `qtele`: run teleportation simulations, sweeps and reconstructions from a
//! flat key-value manifest.
//!
//! Exit codes: 0 on success, 2 for usage and configuration errors, 1 for
//! runtime failures. Files written by a failed command are removed.

mod commands;
mod manifest;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use qtele_core::Error;

use manifest::{parse_overrides, Command, RunManifest};
use output::OutputSet;

#[derive(Debug, thiserror::Error)]
#[error("{message}")]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self { code: 2, message: message.into() }
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        Self { code: 1, message: message.into() }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::Calibration(_) | Error::Format(_) => Self::usage(e.to_string()),
            _ => Self::runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::runtime(format!("i/o error: {e}"))
    }
}

/// Quantum teleportation link simulator.
///
/// Settings come from an optional `key = value` file and `--key value`
/// overrides; keys follow the experiment configuration fields
/// (`source.g1`, `attenuation_db`, `detectors.D5.dark_rate_hz`, ...).
#[derive(Debug, Parser)]
#[command(name = "qtele", version)]
struct Cli {
    #[arg(value_enum)]
    command: Command,
    /// Flat key-value manifest.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Output directory (same as the `output_dir` key).
    #[arg(short, long)]
    output_dir: Option<PathBuf>,
    /// Also write the raw tag streams (same as `emit_tags = true`).
    #[arg(long)]
    emit_tags: bool,
    /// Worker threads; results do not depend on it.
    #[arg(long)]
    threads: Option<usize>,
    /// `--key value` overrides.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
    overrides: Vec<String>,
}

fn run(cli: Cli) -> Result<Vec<PathBuf>, CliError> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::runtime(format!("cannot start thread pool: {e}")))?;
    }
    let mut overrides = parse_overrides(&cli.overrides)?;
    if let Some(dir) = &cli.output_dir {
        overrides.push(("output_dir".into(), dir.display().to_string()));
    }
    if cli.emit_tags {
        overrides.push(("emit_tags".into(), "true".into()));
    }
    let m = RunManifest::resolve(cli.command, cli.config.as_deref(), &overrides)?;
    let mut out = OutputSet::new(&m.output_dir, m.header())?;
    match commands::execute(&m, &mut out) {
        Ok(()) => Ok(out.files().to_vec()),
        Err(e) => {
            out.discard();
            Err(e)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(files) => {
            for f in files {
                println!("{}", f.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("qtele: {e}");
            ExitCode::from(e.code)
        }
    }
}
