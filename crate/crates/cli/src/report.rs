use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::Args;
use factkit_core::dataset::{self, ResponseRecord};
use factkit_core::trainer::{self, IterationMetrics, LossMode};
use serde::Serialize;

#[derive(Args)]
pub struct ReportArgs {
    /// Training histories; each file is one run.
    #[arg(long, num_args = 1..)]
    history: Vec<PathBuf>,
    /// Evaluated record files; each file is one system.
    #[arg(long, num_args = 1..)]
    records: Vec<PathBuf>,
    /// Where to write history.csv, pr_curve.csv and records.csv.
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

fn run_name(path: &Path) -> String {
    path.display().to_string()
}

#[derive(Serialize)]
struct HistoryRow<'a> {
    run: &'a str,
    iteration: usize,
    mean_f1: f64,
    mean_precision: f64,
    mean_recall: f64,
    mean_claims: f64,
    mean_chosen_log_ratio: Option<f64>,
    mean_rejected_log_ratio: Option<f64>,
    loss: Option<f64>,
    batch_size: usize,
    num_batches: usize,
    num_items: usize,
    num_chosen: usize,
    num_rejected: usize,
    loss_mode: LossMode,
    rho: Option<f64>,
}

impl<'a> HistoryRow<'a> {
    fn new(run: &'a str, m: &IterationMetrics) -> Self {
        Self {
            run,
            iteration: m.iteration,
            mean_f1: m.mean_f1,
            mean_precision: m.mean_precision,
            mean_recall: m.mean_recall,
            mean_claims: m.mean_claims,
            mean_chosen_log_ratio: m.mean_chosen_log_ratio,
            mean_rejected_log_ratio: m.mean_rejected_log_ratio,
            loss: m.loss,
            batch_size: m.batch_size,
            num_batches: m.num_batches,
            num_items: m.num_items,
            num_chosen: m.num_chosen,
            num_rejected: m.num_rejected,
            loss_mode: m.loss_mode,
            rho: m.rho,
        }
    }
}

#[derive(Serialize)]
struct CurvePoint<'a> {
    run: &'a str,
    rho: Option<f64>,
    precision: f64,
    recall: f64,
    f1: f64,
}

#[derive(Serialize)]
struct SystemRow<'a> {
    system: &'a str,
    records: usize,
    mean_f1: f64,
    mean_precision: f64,
    mean_claims: f64,
}

const HISTORY_HEADER: [&str; 16] = [
    "run",
    "iteration",
    "mean_f1",
    "mean_precision",
    "mean_recall",
    "mean_claims",
    "mean_chosen_log_ratio",
    "mean_rejected_log_ratio",
    "loss",
    "batch_size",
    "num_batches",
    "num_items",
    "num_chosen",
    "num_rejected",
    "loss_mode",
    "rho",
];

fn to_csv<T: Serialize>(header: &[&str], rows: impl IntoIterator<Item = T>) -> Result<String> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(header)?;
    for row in rows {
        w.serialize(row)?;
    }
    Ok(String::from_utf8(w.into_inner().map_err(|e| anyhow::anyhow!("{e}"))?)?)
}

fn history_csv(runs: &[(String, Vec<IterationMetrics>)]) -> Result<String> {
    let rows = runs
        .iter()
        .flat_map(|(run, history)| history.iter().map(move |m| HistoryRow::new(run, m)));
    to_csv(&HISTORY_HEADER, rows)
}

/// One (precision, recall) point per run, from its final iteration.
fn pr_curve_csv(runs: &[(String, Vec<IterationMetrics>)]) -> Result<String> {
    let rows = runs.iter().filter_map(|(run, history)| {
        history.last().map(|m| CurvePoint {
            run,
            rho: m.rho,
            precision: m.mean_precision,
            recall: m.mean_recall,
            f1: m.mean_f1,
        })
    });
    to_csv(&["run", "rho", "precision", "recall", "f1"], rows)
}

fn records_csv(systems: &[(String, Vec<ResponseRecord>)]) -> Result<String> {
    let rows = systems.iter().map(|(system, records)| {
        let n = records.len().max(1) as f64;
        SystemRow {
            system,
            records: records.len(),
            mean_f1: records.iter().map(|r| r.scores.f1_at_k).sum::<f64>() / n,
            mean_precision: records.iter().map(|r| r.scores.precision_or_zero()).sum::<f64>() / n,
            mean_claims: records.iter().map(|r| r.scores.num_claims as f64).sum::<f64>() / n,
        }
    });
    to_csv(&["system", "records", "mean_f1", "mean_precision", "mean_claims"], rows)
}

pub fn run(args: ReportArgs) -> Result<ExitCode> {
    let mut runs = Vec::new();
    for path in &args.history {
        let history = trainer::read_history(path).with_context(|| format!("reading history {}", path.display()))?;
        runs.push((run_name(path), history));
    }
    let mut systems = Vec::new();
    for path in &args.records {
        let records = dataset::read_records(path).with_context(|| format!("reading records {}", path.display()))?;
        systems.push((run_name(path), records));
    }

    let mut outputs = Vec::new();
    if !args.history.is_empty() || args.records.is_empty() {
        outputs.push(("history.csv", history_csv(&runs)?));
        outputs.push(("pr_curve.csv", pr_curve_csv(&runs)?));
    }
    if !args.records.is_empty() {
        outputs.push(("records.csv", records_csv(&systems)?));
    }

    for (name, text) in &outputs {
        println!("# {name}");
        print!("{text}");
    }
    if let Some(dir) = &args.output_dir {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        for (name, text) in &outputs {
            let path = dir.join(name);
            std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        }
    }
    Ok(ExitCode::SUCCESS)
}
