use std::fs::OpenOptions;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Mutex;

use annostance::exec::Execution;
use annostance_cli::commands::{self, Ctx};
use annostance_cli::config::{Overrides, Resolved};
use annostance_cli::error::CliError;
use clap::{Parser, Subcommand};
use tracing_subscriber::layer::{Layer, SubscriberExt};
use tracing_subscriber::util::SubscriberInitExt;
use tracing_subscriber::{fmt, EnvFilter};

/// Machine annotation pipeline for stance detection.
#[derive(Parser)]
#[command(name = "annostance", version)]
struct Cli {
    /// Run configuration (TOML).
    #[arg(short, long, global = true, default_value = "annostance.toml")]
    config: PathBuf,
    /// Override the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Abort on the first failed example instead of recording it.
    #[arg(long, global = true)]
    strict: bool,
    /// Backend id from `[backends]`, or `mock`.
    #[arg(long, global = true)]
    backend: Option<String>,
    /// Output directory, relative to the working directory.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Run loops sequentially.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Normalize corpus files and report their statistics.
    Ingest,
    /// Label corpora with the configured backend and prompt.
    Annotate,
    /// Sweep the prompt grid and report per-axis score spread.
    Sensitivity,
    /// Build contrary-label samples on extracted noun phrases.
    SampleMultitarget,
    /// Train student models.
    Train,
    /// Score the annotator and students on every test set.
    Evaluate,
    /// Write training-ready files.
    Export,
    /// ingest, annotate, sample-multitarget, train, evaluate and export.
    Pipeline,
}

impl Command {
    fn run(self, ctx: &Ctx) -> Result<(), CliError> {
        match self {
            Command::Ingest => commands::ingest(ctx),
            Command::Annotate => commands::annotate(ctx),
            Command::Sensitivity => commands::sensitivity(ctx),
            Command::SampleMultitarget => commands::sample_multitarget(ctx),
            Command::Train => commands::train(ctx),
            Command::Evaluate => commands::evaluate(ctx),
            Command::Export => commands::export(ctx),
            Command::Pipeline => commands::pipeline(ctx),
        }
    }
}

/// Logs to stderr and, with timestamps, to `<out_dir>/run.log`.
fn init_logging(out_dir: &std::path::Path) -> Result<(), CliError> {
    std::fs::create_dir_all(out_dir).map_err(|e| CliError::io(format!("creating {}", out_dir.display()), e))?;
    let log_path = out_dir.join("run.log");
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| CliError::io(format!("opening {}", log_path.display()), e))?;
    let filter = || EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info"));
    tracing_subscriber::registry()
        .with(fmt::layer().with_writer(std::io::stderr).without_time().with_target(false).with_filter(filter()))
        .with(fmt::layer().with_writer(Mutex::new(file)).with_ansi(false).with_filter(filter()))
        .init();
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    let overrides = Overrides { seed: cli.seed, strict: cli.strict, backend: cli.backend, out_dir: cli.out_dir };
    let cfg = Resolved::load(&cli.config, &overrides)?;
    init_logging(&cfg.out_dir())?;
    tracing::info!("config digest {}", cfg.digest);
    let exec = if cli.sequential { Execution::Sequential } else { Execution::default() };
    cli.command.run(&Ctx { cfg, exec })
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
