//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use factkit_core::align::{self, CombinedParams, KtoParams, LabeledExample, LogProbPair, ReferencePoints};
use factkit_core::dataset::{self, LabelConfig, ResponseRecord};
use factkit_core::evaluator::backend::{GenerativeBackend, RetryPolicy, ScriptedBackend};
use factkit_core::evaluator::heuristic::HeuristicBackend;
use factkit_core::evaluator::retriever::{LexicalRetriever, Passage, Retriever, RetrieverError};
use factkit_core::evaluator::sentences::Sentence;
use factkit_core::evaluator::{evaluate_response, EvaluatorConfig};
use factkit_core::metrics::{self, ClaimVerdict};
use factkit_core::trainer::{self, IterationMetrics, LossMode, SyntheticWorld, TrainConfig};
use factkit_core::{jsonl, Granularity, Label};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const METRIC_TOL: f64 = 1e-12;
const METRIC_BUDGET: Duration = Duration::from_secs(5);
const FD_STEP: f64 = 1e-6;
const FD_REL_TOL: f64 = 1e-5;
const FD_ABS_FLOOR: f64 = 1e-8;
const FD_BATCHES: u64 = 100;
const GRAD_BUDGET: Duration = Duration::from_secs(10);
const SPOT_TOL: f64 = 1e-9;
const BENCHMARK_LR: f64 = 50.0;
const BENCHMARK_BUDGET: Duration = Duration::from_secs(120);
const MAX_QUERIES_PER_CLAIM: usize = 2;
const MAX_PASSAGES_PER_CALL: usize = 3;

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn core_fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures").join(name)
}

/// Exhaustive comparison with a brute-force harmonic mean.
fn metric_oracle() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut cases = 0usize;
    for len in 0..=10usize {
        for mask in 0u32..(1 << len) {
            let verdicts: Vec<ClaimVerdict> = (0..len)
                .map(|i| {
                    if mask & (1 << i) != 0 {
                        ClaimVerdict::Supported
                    } else {
                        ClaimVerdict::NotSupported
                    }
                })
                .collect();
            let supported = mask.count_ones() as f64;
            for k in 1..=12usize {
                let got = metrics::factual_f1_at_k(&verdicts, k).map_err(|e| e.to_string())?;
                if len == 0 {
                    if got != 0.0 {
                        return Err(format!("empty response scored {got}"));
                    }
                    cases += 1;
                    continue;
                }
                let p = supported / len as f64;
                let r = if len >= k { 1.0 } else { len as f64 / k as f64 };
                let expected = if p == 0.0 { 0.0 } else { 1.0 / ((1.0 / p + 1.0 / r) / 2.0) };
                worst = worst.max((got - expected).abs());
                cases += 1;
            }
        }
    }
    let elapsed = start.elapsed();
    check(
        worst <= METRIC_TOL && elapsed < METRIC_BUDGET,
        format!("{cases} cases, max |diff| {worst:.2e}, {elapsed:.2?}"),
    )
}

fn random_label(rng: &mut ChaCha8Rng) -> Label {
    if rng.gen_bool(0.5) {
        Label::Chosen
    } else {
        Label::Rejected
    }
}

fn random_pair(rng: &mut ChaCha8Rng) -> LogProbPair {
    LogProbPair::new(rng.gen_range(-10.0..0.0), rng.gen_range(-10.0..0.0))
}

fn random_batch(seed: u64) -> (Vec<LabeledExample>, Vec<LabeledExample>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let responses = rng.gen_range(1..=8);
    let mut response_batch = Vec::new();
    let mut sentence_items = Vec::new();
    for n in 0..responses {
        let id = format!("r{n}");
        response_batch.push(LabeledExample::response(random_pair(&mut rng), random_label(&mut rng), id.clone()));
        let count = rng.gen_range(0..=4);
        for _ in 0..count {
            sentence_items.push(LabeledExample::sentence(
                random_pair(&mut rng),
                random_label(&mut rng),
                id.clone(),
                count,
            ));
        }
    }
    (response_batch, sentence_items)
}

fn params() -> CombinedParams {
    CombinedParams {
        kto: KtoParams::default().with_beta(0.1),
        fkto: KtoParams::default().with_beta(0.5),
        lambda_combine: 2.0,
    }
}

fn central_difference(
    responses: &[LabeledExample],
    sentences: &[LabeledExample],
    reference: &ReferencePoints,
    granularity: Granularity,
    i: usize,
) -> Result<f64, String> {
    let shifted = |delta: f64| {
        let mut r = responses.to_vec();
        let mut s = sentences.to_vec();
        let item = match granularity {
            Granularity::Response => &mut r[i],
            Granularity::Sentence => &mut s[i],
        };
        item.pair.policy_logprob += delta;
        align::combined_loss_at(&r, &s, &params(), reference).map_err(|e| e.to_string())
    };
    Ok((shifted(FD_STEP)? - shifted(-FD_STEP)?) / (2.0 * FD_STEP))
}

/// Analytic gradients against central differences, reference points held fixed.
fn gradient_check() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut checked = 0usize;
    for seed in 0..FD_BATCHES {
        let (responses, sentences) = random_batch(seed);
        let out = align::loss_and_grads(&responses, &sentences, &params()).map_err(|e| e.to_string())?;
        let grads = [
            (Granularity::Response, &out.response_grads),
            (Granularity::Sentence, &out.sentence_grads),
        ];
        for (granularity, analytic) in grads {
            for (i, a) in analytic.iter().enumerate() {
                let fd = central_difference(&responses, &sentences, &out.reference, granularity, i)?;
                let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(FD_ABS_FLOOR);
                worst = worst.max(rel);
                checked += 1;
            }
        }
    }
    let elapsed = start.elapsed();
    check(
        worst <= FD_REL_TOL && elapsed < GRAD_BUDGET,
        format!("{checked} partials over {FD_BATCHES} batches, max rel err {worst:.2e}, {elapsed:.2?}"),
    )
}

fn single_chosen_loss(r: f64, z0: f64) -> Result<f64, String> {
    let example = LabeledExample::response(LogProbPair::new(r, 0.0), Label::Chosen, "x");
    align::kto_loss_at(&[example], &KtoParams::default(), z0).map_err(|e| e.to_string())
}

fn kto_spot_values() -> Outcome {
    let z0 = 0.3;
    let at_reference = single_chosen_loss(z0, z0)?;
    let beta = KtoParams::default().beta;
    let one_step = single_chosen_loss(z0 + 1.0 / beta, z0)?;
    let expected = 1.0 - 1.0 / (1.0 + (-1.0f64).exp());
    check(
        at_reference == 0.5 && (one_step - expected).abs() <= SPOT_TOL,
        format!("r = z0 -> {at_reference}, beta(r - z0) = 1 -> {one_step:.10} (want {expected:.10})"),
    )
}

fn labeled_record(verdicts: &[Vec<ClaimVerdict>], k: usize) -> Result<ResponseRecord, String> {
    let sentences = (0..verdicts.len()).map(|i| Sentence::new(i, format!("S{i}."))).collect();
    ResponseRecord::from_sentence_verdicts("r", "P", sentences, verdicts, |s, j| format!("c{s}.{j}"), k)
        .map_err(|e| e.to_string())
}

fn labeling_thresholds() -> Outcome {
    use ClaimVerdict::{NotSupported as N, Supported as S};
    let cfg = |k| LabelConfig {
        t: 0.75,
        t_s: 1.0,
        k,
        ..LabelConfig::default()
    };
    let err = |e: dataset::DatasetError| e.to_string();

    // 9 of 12 supported, K = 16: precision and recall both 0.75.
    let at = labeled_record(&[vec![S, S, S, N], vec![S, S, S, N], vec![S, S, S, N]], 16)?;
    let at_label = dataset::label_response(&at, &cfg(16)).map_err(err)?.label;

    // 7501 of 12499 supported, recall capped at 1: f1 = 2 * 7501 / 20000 = 0.7501.
    let mut claims = vec![S; 7_501];
    claims.extend(vec![N; 4_998]);
    let above = labeled_record(&[claims], 100)?;
    let above_label = dataset::label_response(&above, &cfg(100)).map_err(err)?.label;
    let above_f1 = above.scores.f1_at_k;

    let sentences = labeled_record(&[vec![S, S, S], vec![S, S, N], vec![N]], 100)?;
    let sentence_labels: Vec<Label> = dataset::label_sentences(&sentences, &cfg(100))
        .map_err(err)?
        .into_iter()
        .map(|i| i.label)
        .collect();

    check(
        at.scores.f1_at_k == 0.75
            && at_label == Label::Rejected
            && (above_f1 - 0.7501).abs() <= METRIC_TOL
            && above_label == Label::Chosen
            && sentence_labels == [Label::Chosen, Label::Rejected, Label::Rejected],
        format!(
            "f1 0.75 -> {at_label:?}, f1 {above_f1:.6} -> {above_label:?}, sentences {sentence_labels:?}"
        ),
    )
}

fn benchmark_world() -> Result<SyntheticWorld, String> {
    SyntheticWorld::load(&core_fixture("benchmark_world.json")).map_err(|e| e.to_string())
}

fn benchmark_run(world: &SyntheticWorld, loss: LossMode, rho: Option<f64>) -> Result<Vec<IterationMetrics>, String> {
    let cfg = TrainConfig {
        learning_rate: BENCHMARK_LR,
        seed: world.seed,
        loss,
        label: LabelConfig {
            rho,
            seed: world.seed,
            ..LabelConfig::default()
        },
        ..TrainConfig::default()
    };
    trainer::iterative_optimize(world, &cfg)
        .map(|run| run.state.history)
        .map_err(|e| e.to_string())
}

fn alignment_improves(combined: &[IterationMetrics], elapsed: Duration) -> Outcome {
    let first = &combined[0];
    let last = combined.last().unwrap();
    let chosen = last.mean_chosen_log_ratio.unwrap_or(f64::NAN);
    let rejected = last.mean_rejected_log_ratio.unwrap_or(f64::NAN);
    check(
        combined.len() == 4 && last.mean_f1 > first.mean_f1 && chosen > 0.0 && 0.0 > rejected && elapsed < BENCHMARK_BUDGET,
        format!(
            "f1 {:.4} -> {:.4}, chosen log-ratio {chosen:+.3}, rejected log-ratio {rejected:+.3}, {elapsed:.2?}",
            first.mean_f1, last.mean_f1
        ),
    )
}

fn ablation_direction(combined: &[IterationMetrics], kto_only: &[IterationMetrics]) -> Outcome {
    let c = combined.last().unwrap().mean_f1;
    let k = kto_only.last().unwrap().mean_f1;
    check(c >= k, format!("combined f1 {c:.4} vs kto-only f1 {k:.4}"))
}

fn mixing_direction(world: &SyntheticWorld) -> Outcome {
    let mut finals = Vec::new();
    for rho in [0.0, 0.5, 1.0] {
        let history = benchmark_run(world, LossMode::Combined, Some(rho))?;
        finals.push((rho, history.last().unwrap().clone()));
    }
    let (p0, r0) = (finals[0].1.mean_precision, finals[0].1.mean_recall);
    let (p1, r1) = (finals[2].1.mean_precision, finals[2].1.mean_recall);
    let detail = finals
        .iter()
        .map(|(rho, m)| format!("rho {rho}: p {:.4} r {:.4}", m.mean_precision, m.mean_recall))
        .collect::<Vec<_>>()
        .join(", ");
    check(p1 >= p0 && r0 >= r1, detail)
}

struct Spy {
    inner: LexicalRetriever,
    passages_per_call: Mutex<Vec<usize>>,
}

impl Retriever for Spy {
    fn retrieve(&self, query: &str, top_k: usize) -> Result<Vec<Passage>, RetrieverError> {
        let out = self.inner.retrieve(query, top_k)?;
        self.passages_per_call.lock().unwrap().push(out.len());
        Ok(out)
    }
}

#[derive(serde::Deserialize)]
struct Pair {
    prompt: String,
    response: String,
}

fn factkit(args: &[&str]) -> Result<std::process::Output, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_factkit"))
        .args(args)
        .env_remove("FACTKIT_SEED")
        .env_remove("FACTKIT_CACHE_DIR")
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("factkit {args:?} failed: {}", String::from_utf8_lossy(&out.stderr)));
    }
    Ok(out)
}

fn cli_evaluate(output: &Path) -> Result<Vec<u8>, String> {
    let input = core_fixture("responses.jsonl");
    let script = core_fixture("transcript.jsonl");
    let corpus = core_fixture("corpus.jsonl");
    factkit(&[
        "evaluate",
        "--input",
        input.to_str().unwrap(),
        "--output",
        output.to_str().unwrap(),
        "--backend",
        "scripted",
        "--script",
        script.to_str().unwrap(),
        "--retriever",
        "lexical",
        "--corpus",
        corpus.to_str().unwrap(),
    ])?;
    std::fs::read(output).map_err(|e| e.to_string())
}

fn pipeline_determinism(dir: &Path) -> Outcome {
    let first = cli_evaluate(&dir.join("first.jsonl"))?;
    let second = cli_evaluate(&dir.join("second.jsonl"))?;
    let records: Vec<ResponseRecord> = jsonl::read_jsonl(&dir.join("first.jsonl")).map_err(|e| e.to_string())?;
    let claims = records.iter().map(|r| r.assessments.len()).sum::<usize>();
    let max_queries = records
        .iter()
        .flat_map(|r| &r.assessments)
        .map(|a| a.evidence.queries_issued.len())
        .max()
        .unwrap_or(0);

    let heuristic = HeuristicBackend::default();
    let backend = ScriptedBackend::from_jsonl(&core_fixture("transcript.jsonl"))
        .map_err(|e| e.to_string())?
        .with_fallback(move |r| heuristic.complete(r));
    let spy = Spy {
        inner: LexicalRetriever::from_jsonl(&core_fixture("corpus.jsonl")).map_err(|e| e.to_string())?,
        passages_per_call: Mutex::new(Vec::new()),
    };
    let cfg = EvaluatorConfig {
        retry: RetryPolicy::no_delay(),
        ..EvaluatorConfig::default()
    };
    let pairs: Vec<Pair> = jsonl::read_jsonl(&core_fixture("responses.jsonl")).map_err(|e| e.to_string())?;
    let mut library = Vec::new();
    for p in &pairs {
        library.push(evaluate_response(&p.prompt, &p.response, &backend, &spy, &cfg).map_err(|e| e.to_string())?);
    }
    let mut library_bytes = Vec::new();
    jsonl::write_jsonl_to(&mut library_bytes, &library).map_err(|e| e.to_string())?;
    let calls = spy.passages_per_call.lock().unwrap();
    let max_passages = calls.iter().copied().max().unwrap_or(0);

    check(
        first == second
            && first == library_bytes
            && claims > 0
            && max_queries <= MAX_QUERIES_PER_CLAIM
            && max_passages <= MAX_PASSAGES_PER_CALL,
        format!(
            "{} bytes identical across runs, {claims} claims, max {max_queries} queries per claim, {} calls with max {max_passages} passages",
            first.len(),
            calls.len()
        ),
    )
}

fn pipeline_defaults(dir: &Path) -> Outcome {
    let world = core_fixture("benchmark_world.json");
    let out = dir.join("pipeline");
    factkit(&["pipeline", "--world", world.to_str().unwrap(), "--output-dir", out.to_str().unwrap()])?;
    let history = trainer::read_history(&out.join("history.jsonl")).map_err(|e| e.to_string())?;
    let iterations: Vec<usize> = history.iter().map(|m| m.iteration).collect();
    let batch_sizes_ok = history.iter().all(|m| m.batch_size == 16);
    check(
        iterations == [0, 1, 2, 3] && batch_sizes_ok,
        format!("history iterations {iterations:?}, batch size 16 everywhere: {batch_sizes_ok}"),
    )
}

fn main() {
    let tmp = tempfile::tempdir().expect("temp dir");
    let world = benchmark_world();
    let start = Instant::now();
    let combined = world.as_ref().map_err(Clone::clone).and_then(|w| benchmark_run(w, LossMode::Combined, None));
    let combined_elapsed = start.elapsed();
    let kto_only = world.as_ref().map_err(Clone::clone).and_then(|w| benchmark_run(w, LossMode::KtoOnly, None));

    let results: Vec<(&str, Outcome)> = vec![
        ("1 metric oracle", metric_oracle()),
        ("2 gradient check", gradient_check()),
        ("3 KTO spot values", kto_spot_values()),
        ("4 labeling thresholds", labeling_thresholds()),
        (
            "5 toy alignment improves",
            combined.clone().and_then(|c| alignment_improves(&c, combined_elapsed)),
        ),
        (
            "6 fKTO ablation direction",
            combined.clone().and_then(|c| kto_only.clone().and_then(|k| ablation_direction(&c, &k))),
        ),
        ("7 precision-recall mixing", world.clone().and_then(|w| mixing_direction(&w))),
        ("8 evaluate determinism", pipeline_determinism(tmp.path())),
        ("9 pipeline defaults", pipeline_defaults(tmp.path())),
    ];

    let mut failed = 0;
    for (name, outcome) in &results {
        match outcome {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name}: {detail}");
            }
        }
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
