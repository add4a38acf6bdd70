#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

use std::path::PathBuf;
use std::process::ExitCode;

use arlif_cli::{cmd_ablate, cmd_energy, cmd_eval, cmd_oracle_check, cmd_train, CliError};
use clap::{Parser, Subcommand};

/// Train and inspect adaptive-reset spiking networks.
#[derive(Parser)]
#[command(name = "arlif", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a network and write run logs, CSVs, energy report and model.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (overrides `output_dir` in the config).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Overwrite existing outputs.
        #[arg(long)]
        force: bool,
    },
    /// Train the six reset variants and write ablation.csv.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        force: bool,
    },
    /// Compare soft-reset simulation with the closed-form spike recursion.
    OracleCheck {
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        #[arg(long, default_value_t = 8)]
        max_t: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, hide = true)]
        corrupt_decay: Option<f64>,
    },
    /// Energy estimate of a run log, or of `macs_m acs_m` pairs on stdin.
    Energy {
        #[arg(long)]
        runlog: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Evaluate a saved model on the configured test split.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train {
            config,
            out,
            seed,
            force,
        } => {
            let outcome = cmd_train(&config, out.as_deref(), seed, force)?;
            println!("wrote {}", outcome.out_dir.display());
        }
        Command::Ablate {
            config,
            out,
            seed,
            force,
        } => {
            cmd_ablate(&config, out.as_deref(), seed, force)?;
        }
        Command::OracleCheck {
            trials,
            max_t,
            seed,
            corrupt_decay,
        } => {
            cmd_oracle_check(trials, max_t, seed, corrupt_decay)?;
        }
        Command::Energy { runlog, out, force } => {
            cmd_energy(runlog.as_deref(), out.as_deref(), force, std::io::stdin().lock())?;
        }
        Command::Eval { config, model, seed } => {
            cmd_eval(&config, &model, seed)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
