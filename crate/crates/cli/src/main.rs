use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use esrf_core::config::ExperimentConfig;
use esrf_core::error::{EsrfError, Result};
use esrf_core::harness::{run, transforms_audit_report};
use esrf_core::par::{available_workers, with_workers};

/// Ensemble square-root filter experiments.
#[derive(Parser)]
#[command(name = "esrf", disable_version_flag = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a key = value config file.
    Run {
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Worker threads; ESRF_WORKERS takes precedence.
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Randomized identity and bound audit of the transforms.
    AuditTransforms {
        #[arg(long, default_value_t = 200)]
        sweeps: usize,
        #[arg(long, default_value_t = 6)]
        dim: usize,
        #[arg(long, default_value_t = 20)]
        max_members: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print the version.
    Version,
}

fn workers(flag: Option<usize>) -> Result<usize> {
    match std::env::var("ESRF_WORKERS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| {
                EsrfError::Config(format!(
                    "ESRF_WORKERS must be a positive integer, got `{v}`"
                ))
            }),
        Err(_) => Ok(flag.unwrap_or_else(available_workers).max(1)),
    }
}

/// Writes to stdout, ignoring a closed pipe.
fn emit(text: &str) {
    let _ = std::io::stdout().lock().write_all(text.as_bytes());
}

fn execute(command: Command) -> Result<bool> {
    match command {
        Command::Run {
            config,
            seed,
            workers: flag,
            out,
        } => {
            let mut cfg = ExperimentConfig::from_file(&config)?;
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            if let Some(out) = out {
                cfg.out = out;
            }
            let outcome = run(&cfg, workers(flag)?)?;
            emit(&outcome.summary);
            emit(&format!(
                "outputs written to {}\n",
                outcome.out_dir.display()
            ));
            Ok(outcome.pass)
        }
        Command::AuditTransforms {
            sweeps,
            dim,
            max_members,
            seed,
        } => {
            if dim < 1 || max_members < 2 {
                return Err(EsrfError::Config(
                    "dim must be positive and max-members at least 2".into(),
                ));
            }
            let report = with_workers(workers(None)?, || {
                transforms_audit_report(seed, sweeps, dim, max_members)
            })?;
            emit(&format!("{}\n", report.summary()));
            for v in &report.violations {
                emit(&format!(
                    "  instance {}: {} ({} > {})\n",
                    v.instance, v.check, v.lhs, v.rhs
                ));
            }
            Ok(report.pass)
        }
        Command::Version => {
            emit(&format!("esrf {}\n", env!("CARGO_PKG_VERSION")));
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
