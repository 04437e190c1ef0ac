mod config;
mod evaluate;
mod label;
mod report;
mod train;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::AppConfig;

#[derive(Parser)]
#[command(name = "factkit", version, about = "Long-form factuality evaluation and factuality-aware alignment")]
struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, env = "FACTKIT_SEED")]
    seed: Option<u64>,
    /// Backend response cache; reruns with a complete cache need no network.
    #[arg(long, global = true, env = "FACTKIT_CACHE_DIR")]
    cache_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Score prompt/response pairs claim by claim.
    Evaluate(evaluate::EvaluateArgs),
    /// Turn assessed records into chosen/rejected items.
    Label(label::LabelArgs),
    /// Run iterative alignment on a synthetic world.
    TrainToy(train::TrainArgs),
    /// Tabulate training histories or evaluated records.
    Report(report::ReportArgs),
    /// Sample, assess, label and train for every iteration, writing all artifacts.
    Pipeline(train::PipelineArgs),
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_env("FACTKIT_LOG")
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn")),
        )
        .init();

    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    let mut cfg = AppConfig::load(cli.config.as_deref())?;
    let seed = cli.seed.unwrap_or(cfg.seed);
    cfg.set_seed(seed);
    config::apply(&mut cfg.cache_dir, cli.cache_dir.map(Some));
    match cli.command {
        Command::Evaluate(args) => evaluate::run(args, cfg),
        Command::Label(args) => label::run(args, cfg),
        Command::TrainToy(args) => train::run_train(args, cfg),
        Command::Report(args) => report::run(args),
        Command::Pipeline(args) => train::run_pipeline(args, cfg),
    }
}
