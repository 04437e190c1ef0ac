use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, ValueEnum};
use factkit_core::dataset;
use factkit_core::jsonl;
use factkit_core::trainer::{self, IterationMetrics, LossMode, SyntheticWorld, ToyLM, TrainRun};
use serde::Serialize;

use crate::config::{self, AppConfig};

#[derive(Clone, Copy, ValueEnum)]
enum LossArg {
    Combined,
    KtoOnly,
}

impl From<LossArg> for LossMode {
    fn from(l: LossArg) -> Self {
        match l {
            LossArg::Combined => LossMode::Combined,
            LossArg::KtoOnly => LossMode::KtoOnly,
        }
    }
}

#[derive(Args)]
pub struct TrainFlags {
    /// Synthetic world definition (JSON).
    #[arg(long)]
    world: PathBuf,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, value_enum)]
    loss: Option<LossArg>,
    /// Label this fraction of responses by precision and the rest by recall@K.
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    t: Option<f64>,
    #[arg(long)]
    t_s: Option<f64>,
    #[arg(long)]
    grad_clip: Option<f64>,
    /// Snapshot the reference model again at every iteration.
    #[arg(long)]
    refreeze_reference: bool,
}

#[derive(Args)]
pub struct TrainArgs {
    #[command(flatten)]
    flags: TrainFlags,
    /// Per-iteration metrics, one JSON object per line.
    #[arg(long)]
    history: PathBuf,
    /// Optional dump of the trained model.
    #[arg(long)]
    model_out: Option<PathBuf>,
}

#[derive(Args)]
pub struct PipelineArgs {
    #[command(flatten)]
    flags: TrainFlags,
    /// Receives history.jsonl, records.jsonl, items.jsonl and model.json.
    #[arg(long)]
    output_dir: PathBuf,
}

#[derive(Serialize)]
struct Inputs<'a> {
    world: &'a Path,
}

fn apply_flags(flags: &TrainFlags, cfg: &mut AppConfig) -> Result<SyntheticWorld> {
    let t = &mut cfg.train;
    config::apply(&mut t.iterations, flags.iterations);
    config::apply(&mut t.batch_size, flags.batch_size);
    config::apply(&mut t.learning_rate, flags.learning_rate);
    config::apply(&mut t.epochs_per_iteration, flags.epochs);
    config::apply(&mut t.loss, flags.loss.map(LossMode::from));
    config::apply(&mut t.grad_clip, flags.grad_clip.map(Some));
    if flags.refreeze_reference {
        t.refreeze_reference = true;
    }
    config::apply(&mut cfg.label.rho, flags.rho.map(Some));
    config::apply(&mut cfg.label.t, flags.t);
    config::apply(&mut cfg.label.t_s, flags.t_s);
    cfg.train.label = cfg.label;
    cfg.train.validate()?;
    Ok(SyntheticWorld::load(&flags.world)?)
}

fn train(world: &SyntheticWorld, cfg: &AppConfig) -> Result<TrainRun> {
    Ok(trainer::iterative_optimize(world, &cfg.train)?)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn run_train(args: TrainArgs, mut cfg: AppConfig) -> Result<ExitCode> {
    let world = apply_flags(&args.flags, &mut cfg)?;
    let run = train(&world, &cfg)?;
    let inputs = || Inputs { world: &args.flags.world };
    trainer::write_history(&args.history, &run.state.history)?;
    config::write_provenance(&args.history, "train-toy", inputs(), &cfg)?;
    if let Some(path) = &args.model_out {
        write_json(path, &run.state.policy)?;
        config::write_provenance(path, "train-toy", inputs(), &cfg)?;
    }
    print_history(&run.state.history);
    println!();
    print_model(&run.state.policy, &world)?;
    Ok(ExitCode::SUCCESS)
}

pub fn run_pipeline(args: PipelineArgs, mut cfg: AppConfig) -> Result<ExitCode> {
    let world = apply_flags(&args.flags, &mut cfg)?;
    let run = train(&world, &cfg)?;
    let dir = &args.output_dir;
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let inputs = || Inputs { world: &args.flags.world };

    let history = dir.join("history.jsonl");
    trainer::write_history(&history, &run.state.history)?;
    let records = dir.join("records.jsonl");
    dataset::write_records(&records, &run.records)?;
    let items = dir.join("items.jsonl");
    jsonl::write_jsonl(&items, &run.pool)?;
    let model = dir.join("model.json");
    write_json(&model, &run.state.policy)?;
    for path in [&history, &records, &items, &model] {
        config::write_provenance(path, "pipeline", inputs(), &cfg)?;
    }
    print_history(&run.state.history);
    Ok(ExitCode::SUCCESS)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"))
}

pub fn print_history(history: &[IterationMetrics]) {
    println!(
        "{:>9} {:>8} {:>9} {:>8} {:>7} {:>9} {:>9} {:>8} {:>7} {:>7}",
        "iteration", "f1@k", "precision", "recall", "claims", "chosen", "rejected", "loss", "batch", "batches"
    );
    for m in history {
        println!(
            "{:>9} {:>8.4} {:>9.4} {:>8.4} {:>7.2} {:>9} {:>9} {:>8} {:>7} {:>7}",
            m.iteration,
            m.mean_f1,
            m.mean_precision,
            m.mean_recall,
            m.mean_claims,
            fmt_opt(m.mean_chosen_log_ratio),
            fmt_opt(m.mean_rejected_log_ratio),
            fmt_opt(m.loss),
            m.batch_size,
            m.num_batches
        );
    }
}

/// Where each context row sends its probability mass.
fn print_model(model: &ToyLM, world: &SyntheticWorld) -> Result<()> {
    println!("{:>8} {:>8} {:>8} {:>8} {:>8}", "after", "fact", "other", "sep", "eos");
    let sep = model.token_id(&world.separator)?;
    let eos = model.token_id(&world.eos)?;
    let mut rows: Vec<(String, Option<usize>)> = vec![("<bos>".into(), None)];
    for p in &world.prompts {
        rows.push((p.clone(), Some(model.token_id(p)?)));
    }
    rows.push((world.separator.clone(), Some(sep)));
    for (name, prev) in rows {
        let probs = model.next_token_distribution(prev);
        let (mut fact, mut other) = (0.0, 0.0);
        for (j, p) in probs.iter().enumerate() {
            if j == sep || j == eos {
                continue;
            }
            if world.fact_tokens.contains(model.token(j)?) {
                fact += p;
            } else {
                other += p;
            }
        }
        println!(
            "{:>8} {:>8.4} {:>8.4} {:>8.4} {:>8.4}",
            name, fact, other, probs[sep], probs[eos]
        );
    }
    Ok(())
}
