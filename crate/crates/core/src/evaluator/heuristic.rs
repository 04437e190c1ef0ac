//! A rule-based stand-in for a chat model, answering each evaluator
//! template from the request's placeholder fields. Deterministic and
//! offline; good enough to exercise the whole pipeline on small fixtures.

use std::collections::BTreeSet;

use super::backend::{BackendError, GenerativeBackend, PromptRequest};
use super::prompts::{ASSESS, DECOMPOSE, QUERY, REVISE, TOPIC_PROMPT};
use super::retriever::content_terms;

#[derive(Debug, Clone)]
pub struct HeuristicBackend {
    /// Fraction of the statement's content terms that must appear in the
    /// knowledge for a `Supported` answer.
    pub support_threshold: f64,
}

impl Default for HeuristicBackend {
    fn default() -> Self {
        Self { support_threshold: 0.8 }
    }
}

const PRONOUNS: &[&str] = &["he", "she", "it", "they"];
const POSSESSIVES: &[&str] = &["his", "her", "its", "their"];
const GREETINGS: &[&str] = &["hello", "hi", "hey", "sure", "thanks", "okay", "ok", "certainly"];

fn first_word_lower(text: &str) -> String {
    text.split_whitespace()
        .next()
        .unwrap_or("")
        .trim_matches(|c: char| !c.is_alphanumeric())
        .to_lowercase()
}

fn strip_list_marker(text: &str) -> &str {
    let t = text.trim_start();
    for marker in ["- ", "* ", "\u{2022} "] {
        if let Some(rest) = t.strip_prefix(marker) {
            return rest;
        }
    }
    let digits = t.find(|c: char| !c.is_ascii_digit()).unwrap_or(0);
    if digits > 0 {
        if let Some(rest) = t[digits..].strip_prefix(". ").or_else(|| t[digits..].strip_prefix(") ")) {
            return rest;
        }
    }
    t
}

/// Leading words up to (not including) the first lowercase word after the first.
fn subject_of(clause: &str) -> String {
    let words: Vec<&str> = clause.split_whitespace().collect();
    let end = words
        .iter()
        .enumerate()
        .skip(1)
        .find(|(_, w)| w.chars().next().is_some_and(char::is_lowercase))
        .map_or(words.len(), |(i, _)| i);
    words[..end].join(" ")
}

fn capitalize(text: &str) -> String {
    let mut chars = text.chars();
    chars
        .next()
        .map_or_else(String::new, |c| c.to_uppercase().chain(chars).collect())
}

fn decompose(sentence: &str) -> String {
    let body = strip_list_marker(sentence).trim();
    let words = body.split_whitespace().count();
    let greeting = GREETINGS.contains(&first_word_lower(body).as_str()) && words <= 5;
    let first_person = first_word_lower(body) == "i";
    if body.ends_with('?') || words < 2 || greeting || first_person {
        return "NONE".into();
    }
    let core = body.trim_end_matches(['.', '!', ';', ':']);
    let mut clauses: Vec<String> = Vec::new();
    for part in core.split("; ") {
        let pieces: Vec<&str> = part.split(" and ").collect();
        let mut current = pieces[0].trim_end_matches(',').to_string();
        for piece in &pieces[1..] {
            let piece = piece.trim();
            let starts_lower = piece.chars().next().is_some_and(char::is_lowercase);
            let own_subject = PRONOUNS.contains(&first_word_lower(piece).as_str());
            if own_subject && current.split_whitespace().count() >= 3 {
                clauses.push(current);
                current = capitalize(piece);
            } else if starts_lower && piece.split_whitespace().count() >= 2 && current.split_whitespace().count() >= 3 {
                let subject = subject_of(&clauses.first().cloned().unwrap_or_else(|| current.clone()));
                clauses.push(current);
                current = format!("{subject} {piece}");
            } else {
                current = format!("{current} and {piece}");
            }
        }
        clauses.push(current);
    }
    clauses
        .into_iter()
        .map(|c| format!("- {}.", c.trim()))
        .collect::<Vec<_>>()
        .join("\n")
}

fn revise(statement: &str, response: &str) -> String {
    let first = first_word_lower(statement);
    let lead = response.split_whitespace().next().map(first_word_lower).unwrap_or_default();
    let name = subject_of(response.split(['.', '!', '?']).next().unwrap_or(""));
    let usable = !name.is_empty() && !PRONOUNS.contains(&lead.as_str()) && !POSSESSIVES.contains(&lead.as_str());
    let rest = statement.split_once(char::is_whitespace).map_or("", |(_, r)| r);
    if usable && PRONOUNS.contains(&first.as_str()) {
        format!("{name} {rest}")
    } else if usable && POSSESSIVES.contains(&first.as_str()) {
        format!("{name}'s {rest}")
    } else {
        statement.trim().to_string()
    }
}

fn query(statement: &str, previous: &str) -> String {
    let terms = content_terms(statement).join(" ");
    let issued: BTreeSet<&str> = previous.lines().map(str::trim).collect();
    let candidates = [terms.clone(), statement.trim().to_string(), format!("{terms} history")];
    let chosen = candidates
        .iter()
        .find(|c| !issued.contains(c.as_str()))
        .unwrap_or(&candidates[0]);
    format!("I will search for:\n```\n{chosen}\n```")
}

fn assess(statement: &str, knowledge: &str, threshold: f64) -> String {
    let terms: BTreeSet<String> = content_terms(statement).into_iter().collect();
    let known: BTreeSet<String> = content_terms(knowledge).into_iter().collect();
    let matched: Vec<&String> = terms.iter().filter(|t| known.contains(*t)).collect();
    let numbers_ok = terms
        .iter()
        .filter(|t| t.chars().all(|c| c.is_ascii_digit()))
        .all(|t| known.contains(t));
    let coverage = if terms.is_empty() {
        0.0
    } else {
        matched.len() as f64 / terms.len() as f64
    };
    let supported = !terms.is_empty() && numbers_ok && coverage >= threshold;
    format!(
        "The KNOWLEDGE mentions {} of the {} key terms in the STATEMENT{}.\n\nSTATEMENT: {}\n\n[{}]",
        matched.len(),
        terms.len(),
        if numbers_ok { "" } else { ", and a number in the STATEMENT does not appear" },
        statement.trim(),
        if supported { "Supported" } else { "Not Supported" }
    )
}

impl GenerativeBackend for HeuristicBackend {
    fn model_id(&self) -> &str {
        "heuristic"
    }

    fn complete(&self, request: &PromptRequest) -> Result<String, BackendError> {
        Ok(match request.template_id.as_str() {
            DECOMPOSE => decompose(request.field("sentence")),
            REVISE => revise(request.field("statement"), request.field("response")),
            QUERY => query(request.field("statement"), request.field("previous_queries")),
            ASSESS => assess(request.field("statement"), request.field("knowledge"), self.support_threshold),
            TOPIC_PROMPT => format!("[What is {}?]", request.field("topic")),
            other => return Err(BackendError::Script(format!("no heuristic for template {other:?}"))),
        })
    }
}
