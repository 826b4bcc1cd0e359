use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use pdenet::experiment::{evaluate_model_files, export_grid, Experiment, ExperimentError};
use pdenet::optimize::Termination;

#[derive(Parser)]
#[command(name = "pdenet", version, about = "Train and evaluate neural-network PDE solvers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the collocation dataset(s) of an experiment.
    Sample {
        #[arg(long)]
        config: PathBuf,
        /// Only the dataset used by this run seed (default: every ensemble seed).
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one model on an existing dataset.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Initialization seed (default: the first ensemble seed).
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train every ensemble seed and report μ, σ, μ̃ and τ.
    Ensemble {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Members trained concurrently.
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Recompute ensemble statistics from model files.
    Evaluate {
        #[arg(required = true)]
        models: Vec<PathBuf>,
        /// Write the report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write |u - û| and residual magnitudes on the measurement grid as CSV.
    ExportGrid {
        model: PathBuf,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
}

fn to_json<T: serde::Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("reports serialize")
}

fn run(cli: Cli) -> Result<ExitCode, ExperimentError> {
    match cli.command {
        Command::Sample { config, seed, out } => {
            let exp = Experiment::from_file(&config, out)?;
            let seeds = seed.map_or_else(|| exp.config.ensemble.seeds.clone(), |s| vec![s]);
            for path in exp.sample(&seeds)? {
                println!("{}", path.display());
            }
        }
        Command::Train { config, seed, out } => {
            let exp = Experiment::from_file(&config, out)?;
            let seed = seed.unwrap_or(exp.config.ensemble.seeds[0]);
            let artifact = exp.train(seed)?;
            println!("{}", to_json(&artifact));
            if artifact.termination == Termination::NonFinite {
                eprintln!("error: optimizer produced non-finite values");
                return Ok(ExitCode::from(2));
            }
        }
        Command::Ensemble { config, out, jobs } => {
            let exp = Experiment::from_file(&config, out)?;
            let summary = exp.ensemble(jobs)?;
            for f in &summary.failures {
                eprintln!("warning: seed {} failed: {}", f.seed, f.error);
            }
            println!("{}", to_json(&summary));
        }
        Command::Evaluate { models, out } => {
            let report = evaluate_model_files(&models)?;
            let text = to_json(&report);
            match out {
                Some(path) => std::fs::write(&path, text + "\n")
                    .map_err(|source| ExperimentError::Io { path, source })?,
                None => println!("{text}"),
            }
        }
        Command::ExportGrid { model, out } => {
            let (error, residual) = export_grid(&model, &out)?;
            println!("{}", error.display());
            println!("{}", residual.display());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
