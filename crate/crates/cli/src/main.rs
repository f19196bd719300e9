use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use retc_cli::commands::{self, resolve_out_dir};
use retc_cli::{load_config, CliError, ExperimentConfig, RunContext};

#[derive(Parser)]
#[command(name = "retc", version, about = "Rollout event-triggered control experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Directory for artifacts (overrides `output.dir` in the config).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Suppress progress messages.
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the configured controller.
    Run { config: PathBuf },
    /// Rollout cost over a range of prediction horizons and both variants.
    SweepHorizon { config: PathBuf },
    /// Classical ETC over a grid of trigger parameters.
    EtcSearch { config: PathBuf },
    /// Median OCP solve time per prediction horizon.
    Timing { config: PathBuf },
    /// Synthesize terminal ingredients and check the cost decrease.
    VerifyIngredients { config: PathBuf },
}

type Verb = fn(&ExperimentConfig, &RunContext) -> Result<Vec<PathBuf>, CliError>;

fn dispatch(cli: Cli) -> Result<Vec<PathBuf>, CliError> {
    let (path, verb): (PathBuf, Verb) = match cli.command {
        Command::Run { config } => (config, commands::run),
        Command::SweepHorizon { config } => (config, commands::sweep_horizon),
        Command::EtcSearch { config } => (config, commands::etc_search),
        Command::Timing { config } => (config, commands::timing),
        Command::VerifyIngredients { config } => (config, commands::verify_ingredients),
    };
    let cfg = load_config(&path)?;
    let ctx = RunContext {
        out_dir: resolve_out_dir(cli.out.as_deref(), &cfg),
        quiet: cli.quiet,
    };
    verb(&cfg, &ctx)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let quiet = cli.quiet;
    match dispatch(cli) {
        Ok(files) => {
            if !quiet {
                for f in files {
                    eprintln!("wrote {}", f.display());
                }
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
