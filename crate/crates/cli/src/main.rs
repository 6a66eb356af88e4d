use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tracing_subscriber::EnvFilter;

use occludox_cli::commands::{self, Context};
use occludox_cli::config::load_config;
use occludox_cli::{CliError, CliResult};

#[derive(Parser)]
#[command(
    name = "occludox",
    version,
    about = "Occlusion attacks and defenses on small image classifiers"
)]
struct Cli {
    /// JSON experiment configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for evaluation (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Shorter default attack grid.
    #[arg(long, global = true)]
    fast: bool,
    /// Overwrite a non-empty output directory.
    #[arg(long, global = true)]
    force: bool,
    /// Output path, overriding the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic sign dataset as PPM folders.
    GenData,
    /// Train a model with the configured method.
    Train,
    /// Evaluate one checkpoint across an attack-strength grid.
    Attack,
    /// Evaluate several defenses across an attack-strength grid.
    Sweep,
    /// Randomized-smoothing predictions on the test split.
    SmoothPredict,
    /// Render a report CSV as an SVG line chart.
    Plot {
        /// Report CSV written by `attack` or `sweep`.
        report: PathBuf,
    },
}

fn run(cli: Cli) -> CliResult<PathBuf> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| CliError::Config(format!("--threads: {e}")))?;
    }
    let loaded = load_config(cli.config.as_deref())?;
    let ctx = Context {
        loaded,
        seed_flag: cli.seed,
        fast: cli.fast,
        force: cli.force,
        out: cli.out,
    };
    match cli.command {
        Command::GenData => commands::gen_data(&ctx),
        Command::Train => commands::train_cmd(&ctx),
        Command::Attack => commands::attack_cmd(&ctx),
        Command::Sweep => commands::sweep_cmd(&ctx),
        Command::SmoothPredict => commands::smooth_predict_cmd(&ctx),
        Command::Plot { report } => commands::plot_cmd(&ctx, &report),
    }
}

fn main() -> ExitCode {
    let filter = EnvFilter::try_from_env("OCCLUDOX_LOG").unwrap_or_else(|_| EnvFilter::new("info"));
    tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .init();
    match run(Cli::parse()) {
        Ok(path) => {
            println!("{}", path.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
