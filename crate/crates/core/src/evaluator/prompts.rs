//! Prompt templates and parsers for the backend's answers.
//!
//! A template is plain text with named placeholders. A field `knowledge`
//! fills both `{_KNOWLEDGE_PLACEHOLDER}` and `{knowledge}`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use thiserror::Error;

use super::backend::PromptRequest;
use crate::metrics::ClaimVerdict;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TemplateError {
    #[error("template {id}: missing placeholder for field {field:?}")]
    MissingPlaceholder { id: String, field: String },
    #[error("template {id}: no value for field {field:?}")]
    MissingField { id: String, field: String },
    #[error("template {path}: {message}")]
    Io { path: String, message: String },
}

pub const DECOMPOSE: &str = "decompose";
pub const REVISE: &str = "revise";
pub const QUERY: &str = "query";
pub const ASSESS: &str = "assess";
pub const TOPIC_PROMPT: &str = "topic_prompt";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    pub id: String,
    pub text: String,
    fields: Vec<&'static str>,
}

fn placeholder_forms(field: &str) -> [String; 2] {
    [format!("{{_{}_PLACEHOLDER}}", field.to_uppercase()), format!("{{{field}}}")]
}

impl Template {
    fn new(id: &str, text: impl Into<String>, fields: &[&'static str]) -> Result<Self, TemplateError> {
        let text = text.into();
        for field in fields {
            if !placeholder_forms(field).iter().any(|p| text.contains(p.as_str())) {
                return Err(TemplateError::MissingPlaceholder {
                    id: id.into(),
                    field: field.to_string(),
                });
            }
        }
        Ok(Self {
            id: id.into(),
            text,
            fields: fields.to_vec(),
        })
    }

    /// Fills every declared placeholder; each must have a value in `values`.
    pub fn render(&self, values: &[(&str, &str)], temperature: f64) -> Result<PromptRequest, TemplateError> {
        let mut prompt = self.text.clone();
        let mut fields = BTreeMap::new();
        for field in &self.fields {
            let value = values
                .iter()
                .find(|(k, _)| k == field)
                .map(|(_, v)| *v)
                .ok_or_else(|| TemplateError::MissingField {
                    id: self.id.clone(),
                    field: field.to_string(),
                })?;
            for form in placeholder_forms(field) {
                prompt = prompt.replace(&form, value);
            }
            fields.insert(field.to_string(), value.to_string());
        }
        for (k, v) in values {
            fields.entry(k.to_string()).or_insert_with(|| v.to_string());
        }
        Ok(PromptRequest {
            template_id: self.id.clone(),
            prompt,
            temperature,
            fields,
        })
    }
}

/// The evaluator's template set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplates {
    pub decompose: Template,
    pub revise: Template,
    pub query: Template,
    pub assess: Template,
    pub topic_prompt: Template,
    /// Appended to generation prompts to ask for detailed answers.
    pub postamble: String,
}

const SPECS: [(&str, &str, &[&str]); 5] = [
    (DECOMPOSE, include_str!("../../templates/decompose.txt"), &["response", "sentence"]),
    (REVISE, include_str!("../../templates/revise.txt"), &["response", "statement"]),
    (QUERY, include_str!("../../templates/query.txt"), &["knowledge", "statement"]),
    (ASSESS, include_str!("../../templates/assess.txt"), &["knowledge", "statement"]),
    (TOPIC_PROMPT, include_str!("../../templates/topic_prompt.txt"), &["topic"]),
];

const DEFAULT_POSTAMBLE: &str = include_str!("../../templates/postamble.txt");

impl Default for PromptTemplates {
    fn default() -> Self {
        Self::build(|_| Ok(None), DEFAULT_POSTAMBLE.trim().to_string()).expect("bundled templates are valid")
    }
}

impl PromptTemplates {
    /// Bundled defaults, overridden by any `<id>.txt` (and `postamble.txt`)
    /// present in `dir`.
    pub fn from_dir(dir: &Path) -> Result<Self, TemplateError> {
        let read = |name: &str| -> Result<Option<String>, TemplateError> {
            let path = dir.join(format!("{name}.txt"));
            if !path.exists() {
                return Ok(None);
            }
            fs::read_to_string(&path).map(Some).map_err(|e| TemplateError::Io {
                path: path.display().to_string(),
                message: e.to_string(),
            })
        };
        let postamble = read("postamble")?.unwrap_or_else(|| DEFAULT_POSTAMBLE.to_string());
        Self::build(read, postamble.trim().to_string())
    }

    fn build(
        read: impl Fn(&str) -> Result<Option<String>, TemplateError>,
        postamble: String,
    ) -> Result<Self, TemplateError> {
        let mut built = Vec::with_capacity(SPECS.len());
        for (id, default, fields) in SPECS {
            let text = read(id)?.unwrap_or_else(|| default.to_string());
            built.push(Template::new(id, text, fields)?);
        }
        let mut it = built.into_iter();
        let mut next = || it.next().expect("one template per id");
        Ok(Self {
            decompose: next(),
            revise: next(),
            query: next(),
            assess: next(),
            topic_prompt: next(),
            postamble,
        })
    }

    pub fn with_postamble(&self, prompt: &str) -> String {
        format!("{} {}", prompt.trim_end(), self.postamble)
    }
}

/// Claims from a bulleted list; `NONE` or an empty answer means no claims.
pub fn parse_claims(output: &str) -> Vec<String> {
    output
        .lines()
        .map(str::trim)
        .filter_map(|line| {
            let rest = line
                .strip_prefix("- ")
                .or_else(|| line.strip_prefix("* "))
                .or_else(|| line.strip_prefix("\u{2022} "))
                .or_else(|| {
                    let digits = line.find(|c: char| !c.is_ascii_digit())?;
                    let rest = &line[digits..];
                    (digits > 0).then_some(())?;
                    rest.strip_prefix(". ").or_else(|| rest.strip_prefix(") "))
                })?;
            let claim = rest.trim();
            (!claim.is_empty()).then(|| claim.to_string())
        })
        .collect()
}

/// The revised statement: first non-empty line, without bullet or quotes.
pub fn parse_revision(output: &str) -> Option<String> {
    let line = output.lines().map(str::trim).find(|l| !l.is_empty() && !l.starts_with("```"))?;
    let line = line.strip_prefix("- ").unwrap_or(line).trim();
    let line = line.trim_matches('"').trim();
    (!line.is_empty()).then(|| line.to_string())
}

/// Contents of the first markdown code block.
pub fn parse_fenced_block(output: &str) -> Option<String> {
    let start = output.find("```")? + 3;
    let after = &output[start..];
    let end = after.find("```")?;
    let mut body = &after[..end];
    // Drop a language tag on the opening line.
    if let Some(newline) = body.find('\n') {
        if !body[..newline].trim().contains(' ') && !body[newline..].trim().is_empty() {
            body = &body[newline + 1..];
        }
    }
    let body = body.trim();
    (!body.is_empty()).then(|| body.to_string())
}

/// Verdict from the last bracketed token that names one; `Err` carries the
/// offending token (or a note that none was found).
pub fn parse_verdict(output: &str) -> Result<ClaimVerdict, String> {
    let mut last_unrecognized = None;
    let mut rest = output;
    let mut tokens = Vec::new();
    while let Some(open) = rest.find('[') {
        let Some(close) = rest[open..].find(']') else { break };
        tokens.push(&rest[open + 1..open + close]);
        rest = &rest[open + close + 1..];
    }
    for token in tokens.iter().rev() {
        let normalized = token.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
        match normalized.as_str() {
            "supported" => return Ok(ClaimVerdict::Supported),
            "not supported" => return Ok(ClaimVerdict::NotSupported),
            _ => {
                last_unrecognized.get_or_insert_with(|| token.to_string());
            }
        }
    }
    Err(match last_unrecognized {
        Some(token) => format!("unrecognized final answer [{token}]"),
        None => "no bracketed final answer".to_string(),
    })
}

/// The question inside square brackets from the topic-prompt template.
pub fn parse_bracketed_question(output: &str) -> Option<String> {
    let open = output.find('[')?;
    let close = output[open..].find(']')? + open;
    let q = output[open + 1..close].trim();
    (!q.is_empty()).then(|| q.to_string())
}
