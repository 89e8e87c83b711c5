//! `unit-scale`: experiments around unit-scaled graphs and simulated
//! low-precision formats. Everything is written as CSV/JSON for plotting
//! elsewhere.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 verification
//! failure, 3 divergence.

mod hist;
mod inspect;
mod manifest;
mod snr;
mod train;

use anyhow::Result;
use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

const VERIFY_FAILED: u8 = 2;
const DIVERGED: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "unit-scale", version, about = "Unit scaling experiments and low-precision format analysis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Print the floating-point format catalog as JSON.
    Formats {
        /// Print a single format (e.g. `fp16`, `fp8-e4a`).
        #[arg(long)]
        name: Option<String>,
    },
    /// Quantisation SNR of N(0, σ²) as a function of σ, one CSV per format.
    Snr {
        /// Comma-separated format names.
        #[arg(long, value_delimiter = ',', default_value = "fp16,fp8-e5a,fp8-e4a")]
        formats: Vec<String>,
        /// log2 of the smallest σ.
        #[arg(long, default_value_t = -20.0, allow_negative_numbers = true)]
        lo: f64,
        /// log2 of the largest σ.
        #[arg(long, default_value_t = 20.0, allow_negative_numbers = true)]
        hi: f64,
        /// Grid points, evenly spaced in log2 σ.
        #[arg(long, default_value_t = 81)]
        points: usize,
        #[arg(long, default_value_t = 100_000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print unit-scaling factors for an op, or the whole table.
    Factors {
        /// Op name, e.g. `matmul`, `softmax`, `weighted_add`. Omit to list all.
        #[arg(long)]
        op: Option<String>,
        /// Dimensions as `b=8,m=1024,n=1024` or `weights=1:2`.
        #[arg(long, default_value = "")]
        dims: String,
    },
    /// Check that a graph (JSON) behaves as a scaled op. Exits 2 if not.
    Verify {
        graph: PathBuf,
        #[arg(long, default_value_t = 5)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Resolve constraints (geometric mean) before checking.
        #[arg(long)]
        resolve: bool,
    },
    /// Exponent histograms of every tensor of a model at initialisation.
    Hist {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a toy model. Exits 3 if the run diverges.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train over a grid of learning rates and seeds. Exits 3 if any run diverges.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Runs in parallel.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Prints a line to stdout; a closed pipe is not an error.
fn emit(text: &dyn std::fmt::Display) {
    use std::io::Write;
    let _ = writeln!(std::io::stdout().lock(), "{text}");
}

fn run(cli: Cli) -> Result<u8> {
    match cli.command {
        Command::Formats { name } => emit(&inspect::formats(name.as_deref())?),
        Command::Factors { op, dims } => emit(&inspect::factors(op.as_deref(), &dims)?),
        Command::Snr { formats, lo, hi, points, samples, seed, out } => {
            let cfg = snr::SnrConfig { formats, log2_lo: lo, log2_hi: hi, points, samples, seed };
            let m = snr::run(&cfg, &out)?;
            emit(&m.display());
        }
        Command::Verify { graph, trials, seed, resolve } => {
            let report = inspect::verify(&graph, trials, seed, resolve)?;
            emit(&serde_json::to_string_pretty(&report)?);
            if !report.is_scaled_op {
                eprintln!("not a scaled op (max residual {:e})", report.max_residual);
                return Ok(VERIFY_FAILED);
            }
        }
        Command::Hist { config, out } => {
            let cfg: hist::HistConfig = manifest::read_config(&config)?;
            emit(&hist::run(&cfg, &out)?.display());
        }
        Command::Train { config, seed, out } => {
            let mut cfg: unit_scaling::train::TrainConfig = manifest::read_config(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let (s, m) = train::run(&cfg, &out)?;
            emit(&m.display());
            if s.underflow {
                eprintln!(
                    "warning: {:.1}% of weight gradients are zero (gradient underflow)",
                    100.0 * s.weight_grad_zero_fraction
                );
            }
            if s.diverged {
                eprintln!("diverged after {} steps", s.steps_run);
                return Ok(DIVERGED);
            }
        }
        Command::Sweep { config, jobs, out } => {
            let cfg: train::SweepConfig = manifest::read_config(&config)?;
            let (diverged, m) = train::sweep(&cfg, jobs, &out)?;
            emit(&m.display());
            if diverged {
                eprintln!("at least one run diverged");
                return Ok(DIVERGED);
            }
        }
    }
    Ok(0)
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
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
