use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dsal_cli::report::report;
use dsal_cli::run::{generate, run};
use dsal_cli::{CliError, ExperimentConfig};
use dsal_core::active::PolicyKind;

/// Deeply supervised active learning on synthetic segmentation data.
#[derive(Parser, Debug)]
#[command(name = "dsal", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug)]
struct Common {
    /// TOML experiment config; omitted sections take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `output_dir`.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the synthetic dataset to PGM files.
    Generate {
        #[command(flatten)]
        common: Common,
        /// Replaces the dataset seed.
        #[arg(long)]
        seed_override: Option<u64>,
    },
    /// Run the active-learning experiment on a generated dataset.
    Run {
        #[command(flatten)]
        common: Common,
        /// Runs this single seed instead of the configured list.
        #[arg(long)]
        seed_override: Option<u64>,
        /// Runs only this policy.
        #[arg(long)]
        policy: Option<PolicyKind>,
    },
    /// Plot and summarize a metrics CSV.
    Report {
        /// Path to metrics.csv.
        csv: PathBuf,
        /// Directory for the plots and summary; defaults to the CSV's directory.
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

fn load(common: &Common) -> Result<ExperimentConfig, CliError> {
    let mut config = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(out) = &common.output {
        config.output_dir = out.clone();
    }
    Ok(config)
}

fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Generate { common, seed_override } => {
            let mut config = load(&common)?;
            if let Some(seed) = seed_override {
                config.dataset.seed = seed;
            }
            let manifest = generate(&config)?;
            let total: usize = manifest.splits.iter().map(|(_, ids)| ids.len()).sum();
            println!("wrote {total} samples to {}", config.data_dir().display());
        }
        Command::Run {
            common,
            seed_override,
            policy,
        } => {
            let mut config = load(&common)?;
            if let Some(seed) = seed_override {
                config.experiment.seeds = vec![seed];
            }
            if let Some(p) = policy {
                config.experiment.policies = vec![p];
            }
            let out = run(&config)?;
            println!("wrote {} rows to {}", out.rows, out.metrics.display());
        }
        Command::Report { csv, output } => {
            let dir = output.unwrap_or_else(|| csv.parent().map(PathBuf::from).unwrap_or_default());
            let out = report(&csv, &dir)?;
            print!("{}", out.text);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
