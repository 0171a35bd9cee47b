use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use recmia::pipeline::{run_experiment, run_sweep, ExperimentConfig, SweepParam};

#[derive(Parser)]
#[command(
    name = "recmia",
    version,
    about = "Membership inference against latent factor recommenders"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one shadow-model attack and write report.json and roc.csv.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the master seed in the config file.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the output directory in the config file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sweep one hyperparameter over values x seeds and write sweep.csv.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// One of k, recommender_lr, attack_lr, N.
        #[arg(long)]
        param: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(path: &PathBuf, out: Option<PathBuf>) -> Result<ExperimentConfig> {
    let mut config = ExperimentConfig::from_json_file(path)
        .with_context(|| format!("reading {}", path.display()))?;
    if let Some(out) = out {
        config.output_dir = out;
    }
    Ok(config)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { config, seed, out } => {
            let mut config = load_config(&config, out)?;
            if let Some(seed) = seed {
                config.seed = seed;
            }
            let report = run_experiment(&config)?;
            println!(
                "auc {:.4}  target members {}  target non-members {}  degenerate {}  ({:.1}s)",
                report.auc,
                report.counts.target_member,
                report.counts.target_nonmember,
                report.degenerate_features,
                report.wall_clock_seconds
            );
            println!("wrote {}", config.output_dir.display());
        }
        Command::Sweep {
            config,
            param,
            values,
            seeds,
            out,
        } => {
            let config = load_config(&config, out)?;
            let param: SweepParam = param.parse()?;
            if values.is_empty() || seeds.is_empty() {
                bail!("--values and --seeds must be non-empty");
            }
            let table = run_sweep(&config, param, &values, &seeds)?;
            for (value, median) in table.medians() {
                println!("{param}={value}  median auc {median:.4}");
            }
            println!("wrote {}", config.output_dir.join("sweep.csv").display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
