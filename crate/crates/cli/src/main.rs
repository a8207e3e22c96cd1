use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

mod commands;
mod config;

use commands::FLAG_LIMIT;
use config::{parse_override, ExperimentConfig};

#[derive(Parser)]
#[command(name = "tomograph", version, about = "Traffic matrix estimation from partial link loads")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Configuration file of `key = value` lines.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override a configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let overrides = self.set.iter().map(|s| parse_override(s)).collect::<Result<Vec<_>>>()?;
        ExperimentConfig::load(self.config.as_deref(), &overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset in canonical CSV form.
    Synth(ConfigArgs),
    /// Convert an Abilene, GEANT or canonical dataset to canonical CSV.
    Convert(ConfigArgs),
    /// Train, estimate and score one method.
    Run {
        #[command(flatten)]
        config: ConfigArgs,
        /// Threads for independent seeded repetitions.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Singular spectra of A and the training-mean Phi, plus flow mean/variance.
    Spectrum(ConfigArgs),
    /// Score an estimates.csv against the dataset.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        estimates: PathBuf,
    },
}

fn dispatch(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Synth(c) => commands::cmd_synth(&c.load()?)?,
        Command::Convert(c) => commands::cmd_convert(&c.load()?)?,
        Command::Run { config, jobs } => {
            let outcomes = commands::cmd_run(&config.load()?, jobs)?;
            if let Some(o) = outcomes.iter().find(|o| o.flagged_fraction > FLAG_LIMIT) {
                eprintln!(
                    "warning: {:.1}% of solver steps flagged in {} (limit {:.0}%)",
                    o.flagged_fraction * 100.0,
                    o.dir.display(),
                    FLAG_LIMIT * 100.0
                );
                return Ok(ExitCode::from(2));
            }
        }
        Command::Spectrum(c) => commands::cmd_spectrum(&c.load()?)?,
        Command::Eval { config, estimates } => {
            commands::cmd_eval(&config.load()?, &estimates)?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match dispatch(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
