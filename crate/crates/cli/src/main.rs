mod commands;
mod config;
mod pgm;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::RunConfig;

#[derive(Parser)]
#[command(name = "phicnet", version, about = "Forecast PDE systems and identify their hidden sources")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Run description (JSON); built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; all cores when omitted.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Simulate a dataset and write manifest + frame blob.
    Generate,
    /// Train a model and write a checkpoint with its loss curve.
    Train,
    /// Horizon metrics and field snapshots for a checkpoint.
    Eval,
    /// Train and evaluate across the configured sweep values.
    Sweep,
    /// Online re-fitting of the physical parameter on a simulated stream.
    Adapt,
}

/// 2 for bad configuration or input files, 3 for numerical failures.
fn exit_code(err: &anyhow::Error) -> u8 {
    use phicnet::Error as E;
    match err.chain().find_map(|e| e.downcast_ref::<E>()) {
        Some(E::Config(_) | E::Format(_) | E::Json(_) | E::ShapeMismatch { .. } | E::LengthMismatch { .. }) => 2,
        Some(E::NonFinite(_) | E::NonFiniteGradient { .. } | E::Unstable { .. } | E::UndefinedMetric(_)) => 3,
        _ => 1,
    }
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global()?;
    }
    let cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    }
    .resolve(cli.seed);
    match cli.command {
        Command::Generate => commands::generate(&cfg, &cli.out),
        Command::Train => commands::train(&cfg, &cli.out),
        Command::Eval => commands::eval(&cfg, &cli.out),
        Command::Sweep => commands::sweep(&cfg, &cli.out),
        Command::Adapt => commands::adapt(&cfg, &cli.out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
