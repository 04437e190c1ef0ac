use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::Args;
use factkit_core::dataset::ResponseRecord;
use factkit_core::evaluator::backend::{CachedBackend, GenerativeBackend, HttpBackend, ScriptedBackend};
use factkit_core::evaluator::heuristic::HeuristicBackend;
use factkit_core::evaluator::retriever::{HttpRetriever, LexicalRetriever, Retriever, ScriptedRetriever};
use factkit_core::evaluator::Evaluator;
use factkit_core::jsonl;
use serde::{Deserialize, Serialize};

use crate::config::{self, AppConfig, BackendKind, RetrieverKind};

#[derive(Args)]
pub struct EvaluateArgs {
    /// JSONL of {"prompt", "response"} objects.
    #[arg(long)]
    input: PathBuf,
    /// Destination for one assessed record per line.
    #[arg(long)]
    output: PathBuf,
    #[arg(long, value_enum)]
    backend: Option<BackendKind>,
    /// Transcript rules for the scripted backend.
    #[arg(long)]
    script: Option<PathBuf>,
    #[arg(long, env = "FACTKIT_BASE_URL")]
    base_url: Option<String>,
    #[arg(long, env = "FACTKIT_MODEL")]
    model: Option<String>,
    #[arg(long, value_enum)]
    retriever: Option<RetrieverKind>,
    /// Corpus JSONL for the lexical retriever.
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    retriever_url: Option<String>,
    #[arg(long)]
    retrieval_script: Option<PathBuf>,
    #[arg(long)]
    top_k: Option<usize>,
    #[arg(long)]
    max_search_steps: Option<usize>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    max_parallel_claims: Option<usize>,
}

#[derive(Deserialize)]
struct Pair {
    prompt: String,
    response: String,
}

#[derive(Serialize)]
struct Inputs<'a> {
    input: &'a PathBuf,
}

fn apply_args(args: &EvaluateArgs, cfg: &mut AppConfig) {
    config::apply(&mut cfg.backend.kind, args.backend);
    config::apply(&mut cfg.backend.script, args.script.clone().map(Some));
    config::apply(&mut cfg.backend.base_url, args.base_url.clone());
    config::apply(&mut cfg.backend.model, args.model.clone());
    config::apply(&mut cfg.retriever.kind, args.retriever);
    config::apply(&mut cfg.retriever.corpus, args.corpus.clone().map(Some));
    config::apply(&mut cfg.retriever.url, args.retriever_url.clone().map(Some));
    config::apply(&mut cfg.retriever.script, args.retrieval_script.clone().map(Some));
    config::apply(&mut cfg.evaluator.top_k, args.top_k);
    config::apply(&mut cfg.evaluator.max_search_steps, args.max_search_steps);
    config::apply(&mut cfg.evaluator.backend_temperature, args.temperature);
    config::apply(&mut cfg.evaluator.k, args.k);
    config::apply(&mut cfg.evaluator.max_parallel_claims, args.max_parallel_claims);
}

fn build_backend(cfg: &AppConfig) -> Result<Box<dyn GenerativeBackend>> {
    let inner: Box<dyn GenerativeBackend> = match cfg.backend.kind {
        BackendKind::Http => Box::new(HttpBackend::from_env(
            cfg.backend.base_url.clone(),
            cfg.backend.model.clone(),
            config::API_KEY_VAR,
        )),
        BackendKind::Scripted => {
            let heuristic = HeuristicBackend::default();
            let scripted = match &cfg.backend.script {
                Some(path) => ScriptedBackend::from_jsonl(path)?,
                None => ScriptedBackend::new("scripted"),
            };
            Box::new(scripted.with_fallback(move |r| heuristic.complete(r)))
        }
    };
    Ok(match &cfg.cache_dir {
        Some(dir) => Box::new(CachedBackend::new(inner, dir.clone())?),
        None => inner,
    })
}

fn build_retriever(cfg: &AppConfig) -> Result<Box<dyn Retriever>> {
    let r = &cfg.retriever;
    Ok(match r.kind {
        RetrieverKind::Lexical => {
            let corpus = r.corpus.as_ref().context("the lexical retriever needs --corpus")?;
            Box::new(LexicalRetriever::from_jsonl(corpus)?)
        }
        RetrieverKind::Http => Box::new(HttpRetriever::new(
            r.url.clone().context("the http retriever needs --retriever-url")?,
        )),
        RetrieverKind::Scripted => {
            let script = r.script.as_ref().context("the scripted retriever needs --retrieval-script")?;
            Box::new(ScriptedRetriever::from_jsonl(script)?)
        }
    })
}

/// A record counts as failed when errors left nothing assessable.
fn failed(record: &ResponseRecord) -> bool {
    record.assessments.is_empty() && !record.unassessed.is_empty()
}

pub fn run(args: EvaluateArgs, mut cfg: AppConfig) -> Result<ExitCode> {
    apply_args(&args, &mut cfg);
    cfg.evaluator.validate()?;
    let pairs: Vec<Pair> = jsonl::read_jsonl(&args.input)?;
    let backend = build_backend(&cfg)?;
    let retriever = build_retriever(&cfg)?;
    let evaluator = Evaluator::new(backend.as_ref(), retriever.as_ref(), cfg.evaluator.clone())?;

    let mut records = Vec::new();
    let mut failures = 0usize;
    let mut last_error = None;
    for (n, pair) in pairs.iter().enumerate() {
        match evaluator.evaluate_response(&pair.prompt, &pair.response) {
            Ok(record) if failed(&record) => {
                let error = record.unassessed[0].error.clone();
                tracing::error!(line = n + 1, %error, "record could not be assessed");
                eprintln!("record {}: {error}", n + 1);
                failures += 1;
                last_error = Some(error);
            }
            Ok(record) => records.push(record),
            Err(e) => {
                tracing::error!(line = n + 1, error = %e, "record failed");
                eprintln!("record {}: {e}", n + 1);
                failures += 1;
                last_error = Some(e.to_string());
            }
        }
    }

    jsonl::write_jsonl(&args.output, &records)?;
    config::write_provenance(&args.output, "evaluate", Inputs { input: &args.input }, &cfg)?;
    print_summary(&records, failures, cfg.evaluator.k);

    if !pairs.is_empty() && records.is_empty() {
        bail!(
            "all {} records failed; last error: {}",
            pairs.len(),
            last_error.unwrap_or_default()
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

fn print_summary(records: &[ResponseRecord], failures: usize, k: usize) {
    let f1 = mean(records.iter().map(|r| r.scores.f1_at_k));
    let precision = mean(records.iter().map(|r| r.scores.precision_or_zero()));
    let claims = mean(records.iter().map(|r| r.scores.num_claims as f64));
    let f1_header = format!("f1@{k}");
    println!("{:>8} {:>8} {:>10} {:>10} {:>10}", "records", "failed", f1_header, "precision", "claims");
    println!(
        "{:>8} {:>8} {:>10.4} {:>10.4} {:>10.2}",
        records.len(),
        failures,
        f1,
        precision,
        claims
    );
}
