use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use condmmd_cli::{CliError, Mutation, SEED_ENV};

/// Conditional MMD metrics and conditional generative models.
#[derive(Parser)]
#[command(name = "condmmd", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a generator; writes model.json, history.csv and report.json to out_dir.
    Train {
        #[arg(long, short)]
        config: PathBuf,
    },
    /// Evaluate a saved model on the configured test split.
    Eval {
        #[arg(long, short)]
        config: PathBuf,
        #[arg(long, short)]
        model: PathBuf,
    },
    /// Run the oracle verification battery.
    Verify {
        /// Swap in a known-bad estimator to confirm the battery catches it.
        #[arg(long, value_name = "jmmd-sign|ammd-sign")]
        mutation: Option<Mutation>,
    },
    /// Measure estimator variances over a grid of sample sizes.
    Varbench {
        #[arg(long, short)]
        config: PathBuf,
    },
    /// Write the configured synthetic dataset as CSV.
    Synth {
        #[arg(long, short)]
        config: PathBuf,
        /// Output path (default: <out_dir>/synthetic.csv).
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
}

fn verify_seed() -> Result<u64, CliError> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| CliError::Usage(format!("{SEED_ENV}={v:?} is not a non-negative integer"))),
        Err(_) => Ok(0),
    }
}

fn run(cmd: Command) -> Result<(), CliError> {
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    match cmd {
        Command::Train { config } => condmmd_cli::cmd_train(&config, &mut out).map(drop),
        Command::Eval { config, model } => condmmd_cli::cmd_eval(&config, &model, &mut out).map(drop),
        Command::Verify { mutation } => condmmd_cli::cmd_verify(mutation, verify_seed()?, &mut out).map(drop),
        Command::Varbench { config } => condmmd_cli::cmd_varbench(&config, &mut out).map(drop),
        Command::Synth { config, out: path } => condmmd_cli::cmd_synth(&config, path.as_deref(), &mut out).map(drop),
    }?;
    let _ = out.flush();
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
