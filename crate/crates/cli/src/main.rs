use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use neural_ida_cli::commands::{cmd_export, cmd_simulate, cmd_train, cmd_verify, EXIT_ERROR};

/// Train, simulate and verify neural IDA-PBC controllers.
///
/// Output files go to the config's `output_dir`, or to $NEURAL_IDA_OUTPUT_DIR
/// when set.
#[derive(Parser)]
#[command(name = "neural-ida", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a controller; exit 0 on convergence, 2 when an iteration cap was hit.
    Train { config: PathBuf },
    /// Simulate every configured initial condition and write trajectory CSVs.
    Simulate {
        config: PathBuf,
        checkpoint: Option<PathBuf>,
        /// Use the J_a = 0 PD-plus-gravity controller instead of the checkpoint.
        #[arg(long)]
        baseline: bool,
    },
    /// Print a JSON acceptance report; exit 0 if every check passes, 3 otherwise.
    Verify {
        config: PathBuf,
        checkpoint: PathBuf,
    },
    /// Write H, H_a and H_d over a state-space grid as CSV.
    Export {
        checkpoint: PathBuf,
        /// Axes as `q1=lo:hi:count,p1=lo:hi:count`; other coordinates stay at x*.
        #[arg(long)]
        grid: String,
        /// Output file (default: energy_map.csv in the output directory).
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut stdout = std::io::stdout();
    let mut stderr = std::io::stderr();
    let result = match &cli.command {
        Command::Train { config } => cmd_train(config, &mut stderr),
        Command::Simulate {
            config,
            checkpoint,
            baseline,
        } => cmd_simulate(config, checkpoint.as_deref(), *baseline, &mut stderr),
        Command::Verify { config, checkpoint } => cmd_verify(config, checkpoint, &mut stdout),
        Command::Export {
            checkpoint,
            grid,
            output,
        } => cmd_export(checkpoint, grid, output.as_deref(), &mut stderr),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_ERROR)
        }
    }
}
