//! Effective configuration: defaults, then the TOML file, then environment
//! variables, then flags. Credentials never live here; the HTTP backend
//! reads its key from `FACTKIT_API_KEY`.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::ValueEnum;
use factkit_core::dataset::LabelConfig;
use factkit_core::evaluator::EvaluatorConfig;
use factkit_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

pub const API_KEY_VAR: &str = "FACTKIT_API_KEY";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum BackendKind {
    /// OpenAI-compatible chat completions endpoint.
    #[default]
    Http,
    /// Offline: transcript rules from `--script`, then the built-in heuristic.
    Scripted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum RetrieverKind {
    Http,
    /// In-memory BM25 over `--corpus`.
    #[default]
    Lexical,
    /// Canned passages from `--retrieval-script`.
    Scripted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub base_url: String,
    pub model: String,
    pub script: Option<PathBuf>,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            kind: BackendKind::Http,
            base_url: "https://api.openai.com/v1".into(),
            model: "gpt-3.5-turbo".into(),
            script: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrieverConfig {
    pub kind: RetrieverKind,
    pub corpus: Option<PathBuf>,
    pub url: Option<String>,
    pub script: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AppConfig {
    pub seed: u64,
    pub cache_dir: Option<PathBuf>,
    pub backend: BackendConfig,
    pub retriever: RetrieverConfig,
    pub evaluator: EvaluatorConfig,
    pub label: LabelConfig,
    pub train: TrainConfig,
}

impl AppConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// The global seed drives both training and the labeling partition.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.train.seed = seed;
        self.label.seed = seed;
    }
}

/// Overwrites `slot` when a flag or environment value was given.
pub fn apply<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

/// Written next to every output file as `<file>.provenance.json`.
#[derive(Serialize)]
pub struct Provenance<'a, I: Serialize> {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'a str,
    pub inputs: I,
    pub config: &'a AppConfig,
}

pub fn provenance_path(output: &Path) -> PathBuf {
    let mut name = output.file_name().unwrap_or_default().to_os_string();
    name.push(".provenance.json");
    output.with_file_name(name)
}

pub fn write_provenance<I: Serialize>(output: &Path, command: &str, inputs: I, config: &AppConfig) -> Result<()> {
    let record = Provenance {
        tool: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        command,
        inputs,
        config,
    };
    let path = provenance_path(output);
    let mut text = serde_json::to_string_pretty(&record)?;
    text.push('\n');
    std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_mirror_reference_settings() {
        let c = AppConfig::default();
        assert_eq!((c.evaluator.top_k, c.evaluator.max_search_steps), (3, 2));
        assert_eq!(c.evaluator.backend_temperature, 0.1);
        assert_eq!((c.label.t, c.label.t_s, c.label.k), (0.75, 1.0, 100));
        assert_eq!((c.train.params.kto.beta, c.train.params.fkto.beta), (0.1, 0.5));
        assert_eq!(c.train.params.lambda_combine, 2.0);
        assert_eq!((c.train.batch_size, c.train.iterations), (16, 3));
    }

    #[test]
    fn file_overrides_defaults_and_rejects_credentials() {
        let c: AppConfig = toml::from_str("seed = 9\n[label]\nt = 0.5\n[train]\nloss = \"kto-only\"\n").unwrap();
        assert_eq!((c.seed, c.label.t, c.label.t_s), (9, 0.5, 1.0));
        assert_eq!(c.train.loss, factkit_core::trainer::LossMode::KtoOnly);
        assert!(toml::from_str::<AppConfig>("[backend]\napi_key = \"sk-x\"\n").is_err());
    }

    #[test]
    fn provenance_sits_next_to_output() {
        assert_eq!(
            provenance_path(Path::new("out/records.jsonl")),
            PathBuf::from("out/records.jsonl.provenance.json")
        );
    }
}
