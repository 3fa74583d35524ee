//! `epictrl`: simulate, verify and map the filling-the-box controller.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use epictrl_core::verification::{DEFAULT_SAMPLES, TOL_OPT};

use crate::commands::ControlChoice;
use crate::config::ConfigError;

#[derive(Parser)]
#[command(
    name = "epictrl",
    version,
    about = "Threshold-constrained optimal control of SIR epidemics"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Source {
    /// Bundled scenario name (default: fig1).
    #[arg(long)]
    scenario: Option<String>,
    /// Scenario TOML file.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write uncontrolled and controlled trajectories plus a JSON summary.
    Simulate {
        #[command(flatten)]
        source: Source,
        /// zero, ftb, or file:<path> with `t_start,u` rows.
        #[arg(long, default_value = "ftb", value_parser = ControlChoice::parse)]
        control: ControlChoice,
        /// Output directory (default: the scenario's).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the invariant checks and the optimality sweep.
    Verify {
        #[command(flatten)]
        source: Source,
        /// Number of random alternative signals.
        #[arg(long, default_value_t = DEFAULT_SAMPLES)]
        alts: usize,
        /// Seed for the random alternatives (default: the scenario's).
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = TOL_OPT)]
        tol_opt: f64,
        /// Write the full report as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
        /// Write one trajectory CSV per alternative into this directory.
        #[arg(long)]
        dump_alternatives: Option<PathBuf>,
    },
    /// Write V on a grid over the region below the lid as `x,y,region,V`.
    ValueMap {
        #[command(flatten)]
        source: Source,
        /// Grid intervals per axis.
        #[arg(long, default_value_t = 100)]
        resolution: usize,
        /// Integrator step for the grid orbits.
        #[arg(long, default_value_t = commands::VALUE_MAP_STEP)]
        step: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// List the bundled scenarios.
    Scenarios,
}

fn configure_threads() -> anyhow::Result<()> {
    let Ok(raw) = std::env::var("EPICTRL_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| ConfigError(format!("EPICTRL_THREADS = `{raw}` is not a positive integer")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    configure_threads()?;
    match cli.command {
        Command::Simulate { source, control, out } => {
            let cfg = config::resolve(source.scenario.as_deref(), source.config.as_deref())?;
            commands::cmd_simulate(&cfg, &control, out)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Verify {
            source,
            alts,
            seed,
            tol_opt,
            json,
            dump_alternatives,
        } => {
            let cfg = config::resolve(source.scenario.as_deref(), source.config.as_deref())?;
            let opts = commands::VerifyOptions {
                alts,
                seed: seed.unwrap_or(cfg.seed),
                tol_opt,
                json,
                dump_alternatives,
            };
            let passed = commands::cmd_verify(&cfg, &opts)?;
            Ok(if passed { ExitCode::SUCCESS } else { ExitCode::from(1) })
        }
        Command::ValueMap {
            source,
            resolution,
            step,
            out,
        } => {
            let cfg = config::resolve(source.scenario.as_deref(), source.config.as_deref())?;
            commands::cmd_value_map(&cfg, resolution, step, out)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Scenarios => {
            for (name, _) in config::BUNDLED {
                println!("{name}");
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

/// 2 for bad input, 3 for an infeasible start or a trivial regime, 1 otherwise.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<ConfigError>() {
            return 2;
        }
        if cause.is::<commands::TrivialRegime>() {
            return 3;
        }
        if let Some(epictrl_core::Error::InfeasibleStart { .. }) = cause.downcast_ref() {
            return 3;
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
