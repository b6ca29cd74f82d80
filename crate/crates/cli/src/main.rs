//! `kalgain`: config-driven runner for the gain learner.
//!
//! Exit codes: 0 success, 2 configuration error, 3 numerical or I/O failure,
//! 64 usage error.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use crate::commands::Context;
use crate::config::{ConfigError, Format};

const EXIT_CONFIG: u8 = 2;
const EXIT_FAILURE: u8 = 3;
const EXIT_USAGE: u8 = 64;

#[derive(Parser)]
#[command(name = "kalgain", version, about = "Learn the steady-state Kalman gain from output data")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// TOML configuration file. Defaults to the embedded mass-spring preset.
    #[arg(long, global = true, value_name = "PATH", conflicts_with = "preset")]
    config: Option<PathBuf>,

    /// Embedded preset: mass_spring or mass_spring_horizon.
    #[arg(long, global = true, value_name = "NAME")]
    preset: Option<String>,

    /// Replaces the configured seed list with this single seed.
    #[arg(long, global = true, value_name = "INT")]
    seed: Option<u64>,

    /// Output directory, overriding output.directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Per-run artifact format, overriding output.formats.
    #[arg(long, global = true, value_enum)]
    format: Option<Format>,

    /// Monte-Carlo sample count for the duality check.
    #[arg(long, global = true, value_name = "N")]
    samples: Option<usize>,

    /// No progress messages on stderr.
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Print the optimal gain, Riccati solution, closed-loop radius and cost as JSON.
    Oracle,
    /// One learning run with the learner block's batch size and horizon.
    Learn,
    /// Diagnostic checks; writes diagnose.json and CSV curves.
    Diagnose,
    /// Compare the adjoint cost against Monte-Carlo prediction error.
    DualityCheck,
    /// Every (batch size, horizon) cell of the sweep, for every seed.
    Experiment,
}

fn load(cli: &Cli) -> Result<Context, ConfigError> {
    let (text, source) = match (&cli.config, &cli.preset) {
        (Some(path), _) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
            (text, path.display().to_string())
        }
        (None, name) => {
            let name = name.as_deref().unwrap_or("mass_spring");
            let text = config::preset(name).ok_or_else(|| {
                let known: Vec<&str> = config::PRESETS.iter().map(|(n, _)| *n).collect();
                ConfigError(format!("unknown preset {name:?}; known: {}", known.join(", ")))
            })?;
            (text.to_string(), format!("preset:{name}"))
        }
    };
    let cfg = config::parse(&text, &source)?;
    Ok(Context {
        cfg,
        source,
        config_sha256: output::sha256_hex(text.as_bytes()),
        out: cli.out.clone(),
        seed: cli.seed,
        format: cli.format,
        samples: cli.samples,
        quiet: cli.quiet,
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(EXIT_USAGE),
            };
        }
    };
    if cli.samples == Some(0) {
        eprintln!("error: --samples must be at least 1");
        return ExitCode::from(EXIT_USAGE);
    }
    let ctx = match load(&cli) {
        Ok(ctx) => ctx,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    let result = match cli.command {
        Command::Oracle => commands::oracle(&ctx),
        Command::Learn => commands::learn(&ctx),
        Command::Diagnose => commands::diagnose(&ctx),
        Command::DualityCheck => commands::duality(&ctx),
        Command::Experiment => commands::experiment(&ctx),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<ConfigError>().is_some() {
                ExitCode::from(EXIT_CONFIG)
            } else {
                ExitCode::from(EXIT_FAILURE)
            }
        }
    }
}
