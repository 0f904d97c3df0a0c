use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use sdflora::config::{ConfigError, ExperimentConfig};
use sdflora::federation::{run_experiment, write_outputs, FederationError};

mod sweep;

/// Selective decoupled federated LoRA simulator.
#[derive(Parser)]
#[command(name = "sdflora", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment.
    Single {
        #[arg(long)]
        config: PathBuf,
        /// Override a config key, e.g. `--set round.total_rounds=5`. Repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Run one experiment per value of a single axis and write a combined summary.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        axis: Axis,
        /// Comma-separated axis values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum Axis {
    Sigma,
    RankBudget,
    NumClients,
    DirichletAlpha,
    Strategy,
}

/// Why a command failed; decides the exit status.
#[derive(Debug)]
pub enum Failure {
    Config(String),
    Runtime(String),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.to_string())
    }
}

impl From<FederationError> for Failure {
    fn from(e: FederationError) -> Self {
        Failure::Runtime(e.to_string())
    }
}

fn single(config: PathBuf, overrides: Vec<String>) -> Result<(), Failure> {
    let cfg = ExperimentConfig::load(&config, &overrides)?;
    let out = run_experiment(&cfg)?;
    write_outputs(&cfg, &out)?;
    let last = out.final_row();
    println!(
        "{}: round {} mean_acc={:.4} client_std={:.4} epsilon={} -> {}",
        last.strategy,
        last.round,
        last.mean_acc,
        last.client_std,
        last.epsilon,
        cfg.output.dir.display()
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Single { config, overrides } => single(config, overrides),
        Command::Sweep {
            config,
            axis,
            values,
            overrides,
        } => sweep::run(&config, axis, &values, &overrides),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("config error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
    }
}
