use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mssrk_cli::commands::{self, RunSettings};
use mssrk_cli::config::{self, MaxwellConfig, NoiseConfig, Run1dConfig};
use mssrk_cli::CliError;

/// Stochastic multi-symplectic Runge-Kutta experiments.
#[derive(Parser)]
#[command(name = "mssrk", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Report the multi-symplectic condition residual of a tableau (exit 1 on FAIL).
    CheckTableau {
        /// Built-in name (midpoint, gauss2, gauss3, euler_explicit, rk4) or a JSON file.
        tableau: String,
        #[arg(long, default_value_t = 1e-12)]
        tol: f64,
    },
    /// Integrate a 1D system and write per-step diagnostics.
    #[command(name = "run-1d")]
    Run1d(RunArgs),
    /// Integrate the 3D stochastic Maxwell equations and write energy diagnostics.
    RunMaxwell(RunArgs),
    /// Sample a Q-Wiener increment table.
    SampleNoise {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Single noise seed, overriding the config.
    #[arg(long, conflicts_with = "seeds")]
    seed: Option<u64>,
    /// Comma-separated seed sweep, one CSV per seed.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Stage solver tolerance, overriding the config.
    #[arg(long)]
    tol: Option<f64>,
}

impl RunArgs {
    fn settings(&self) -> RunSettings {
        RunSettings {
            out: self.out.clone(),
            seed: self.seed,
            seeds: self.seeds.clone(),
            tol: self.tol,
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode, CliError> {
    let mut stdout = std::io::stdout().lock();
    match cli.command {
        Command::CheckTableau { tableau, tol } => {
            let pass = commands::check_tableau(&tableau, tol, &mut stdout)?;
            Ok(if pass { ExitCode::SUCCESS } else { ExitCode::from(1) })
        }
        Command::Run1d(args) => {
            let (cfg, raw): (Run1dConfig, _) = config::load(&args.config)?;
            let summaries = commands::run_1d(&cfg, &raw, &args.settings())?;
            for s in &summaries {
                writeln!(stdout, "{}", s.line("invariant"))?;
            }
            commands::check_failures(&summaries)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::RunMaxwell(args) => {
            let (cfg, raw): (MaxwellConfig, _) = config::load(&args.config)?;
            let summaries = commands::run_maxwell(&cfg, &raw, &args.settings())?;
            for s in &summaries {
                writeln!(stdout, "{}", s.line("energy"))?;
            }
            commands::check_failures(&summaries)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::SampleNoise { config: path, seed, out } => {
            let (cfg, raw): (NoiseConfig, _) = config::load(&path)?;
            let settings = RunSettings {
                out,
                seed,
                ..RunSettings::default()
            };
            let summary = commands::sample_noise(&cfg, &raw, &settings)?;
            writeln!(stdout, "wrote {} ({} steps, seed {})", summary.csv.display(), summary.steps, summary.seed)?;
            for s in &summary.stats {
                writeln!(
                    stdout,
                    "x = {:?}: variance {:.6e}, expected {:.6e} +- {:.2e} ({}), lag-1 correlation {:+.3e} ({})",
                    s.point,
                    s.variance,
                    s.expected_variance,
                    3.0 * s.standard_error,
                    if s.variance_ok() { "within 3 sigma" } else { "outside 3 sigma" },
                    s.lag1_correlation,
                    if s.correlation_ok(summary.steps) { "ok" } else { "high" },
                )?;
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("mssrk: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
