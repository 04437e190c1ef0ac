//! Deterministic rule-based sentence segmentation.
//!
//! Boundaries are terminal punctuation (`.`, `?`, `!`) followed by
//! whitespace, unless the period closes a known abbreviation, a single-letter
//! initial, or a bare list-item number. Blank lines always separate
//! sentences, and a line break before a list item (`1.`, `2)`, `-`, `*`)
//! does too. A line break after terminal punctuation or a colon ends the
//! sentence; other line breaks are soft wraps.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sentence {
    pub index: usize,
    pub text: String,
}

impl Sentence {
    pub fn new(index: usize, text: impl Into<String>) -> Self {
        Self {
            index,
            text: text.into(),
        }
    }
}

const ABBREVIATIONS: &[&str] = &[
    "mr", "mrs", "ms", "dr", "prof", "sr", "jr", "st", "mt", "ft", "vs", "etc", "al", "fig", "figs", "no", "nos", "vol",
    "pp", "inc", "ltd", "co", "corp", "bros", "gen", "col", "lt", "sgt", "capt", "cmdr", "adm", "gov", "sen", "rep",
    "rev", "hon", "pres", "jan", "feb", "mar", "apr", "jun", "jul", "aug", "sep", "sept", "oct", "nov", "dec", "approx",
    "ca", "cf", "dept", "est", "univ", "assn", "ave", "blvd", "rd", "ed", "eds", "op", "cit",
];

const CLOSERS: &[char] = &['"', '\'', ')', ']', '}', '\u{201d}', '\u{2019}', '\u{bb}'];

fn is_terminal(c: char) -> bool {
    matches!(c, '.' | '?' | '!')
}

/// `1.`, `12)`, `-`, `*`, `•` followed by whitespace at the start of `line`.
fn starts_list_item(line: &str) -> bool {
    let line = line.trim_start();
    let mut chars = line.char_indices();
    match chars.next() {
        Some((_, '-' | '*' | '\u{2022}')) => line[1..].starts_with(char::is_whitespace) || line.len() == 1,
        Some((_, c)) if c.is_ascii_digit() => {
            let digits_end = line.find(|c: char| !c.is_ascii_digit()).unwrap_or(line.len());
            let rest = &line[digits_end..];
            (rest.starts_with('.') || rest.starts_with(')'))
                && rest[1..].chars().next().is_none_or(char::is_whitespace)
        }
        _ => false,
    }
}

/// The whitespace-delimited word ending right before byte offset `end`.
fn word_before(text: &str, end: usize) -> &str {
    let head = &text[..end];
    let start = head.rfind(char::is_whitespace).map_or(0, |i| i + 1);
    head[start..].trim_start_matches(['(', '"', '\'', '[', '\u{201c}', '\u{2018}'])
}

fn is_initial(word: &str) -> bool {
    let mut chars = word.chars();
    matches!((chars.next(), chars.next()), (Some(c), None) if c.is_uppercase())
}

/// Whether the words after an initial run through further initials into a
/// capitalized name, as in "J. R. R. Tolkien".
fn initials_lead_to_name(rest: &str) -> bool {
    for word in rest.split_whitespace() {
        if let Some(stem) = word.strip_suffix('.') {
            if is_initial(stem) {
                continue;
            }
        }
        let mut chars = word.chars();
        return chars.next().is_some_and(char::is_uppercase) && chars.next().is_some_and(char::is_alphabetic);
    }
    false
}

/// Whether a period at `dot` closes an abbreviation, an initial, or a list marker.
fn period_is_non_terminal(text: &str, dot: usize) -> bool {
    let word = word_before(text, dot);
    if word.is_empty() {
        return false;
    }
    let lower = word.to_lowercase();
    if ABBREVIATIONS.contains(&lower.as_str()) {
        return true;
    }
    if is_initial(word) {
        return initials_lead_to_name(&text[dot + 1..]);
    }
    // Dotted forms such as "U.S", "e.g", "a.m".
    if word.contains('.') && word.split('.').all(|part| part.chars().count() <= 2) {
        return true;
    }
    if word.chars().all(|c| c.is_ascii_digit()) {
        let line_start = text[..dot].rfind('\n').map_or(0, |i| i + 1);
        return text[line_start..dot].trim() == word;
    }
    false
}

pub fn split_sentences(response: &str) -> Vec<Sentence> {
    let mut spans: Vec<(usize, usize)> = Vec::new();
    let mut start = 0;
    let chars: Vec<(usize, char)> = response.char_indices().collect();
    let mut i = 0;
    while i < chars.len() {
        let (pos, c) = chars[i];
        if c == '\n' {
            let rest = &response[pos + 1..];
            let next_line = rest.split('\n').next().unwrap_or("");
            let blank_follows = next_line.trim().is_empty();
            let before = response[start..pos].trim_end();
            let ends_clause = before.ends_with(|c: char| is_terminal(c) || c == ':' || CLOSERS.contains(&c));
            if blank_follows || starts_list_item(next_line) || ends_clause {
                spans.push((start, pos));
                start = pos + 1;
            }
            i += 1;
            continue;
        }
        if !is_terminal(c) {
            i += 1;
            continue;
        }
        // Consume runs like "?!" or "..." and any closing quotes or brackets.
        let mut j = i;
        while j + 1 < chars.len() && is_terminal(chars[j + 1].1) {
            j += 1;
        }
        while j + 1 < chars.len() && CLOSERS.contains(&chars[j + 1].1) {
            j += 1;
        }
        let end = chars.get(j + 1).map_or(response.len(), |&(p, _)| p);
        let followed_by_space = chars.get(j + 1).is_none_or(|&(_, n)| n.is_whitespace());
        if !followed_by_space {
            i = j + 1;
            continue;
        }
        let next_visible = chars[j + 1..].iter().map(|&(_, n)| n).find(|n| !n.is_whitespace());
        let boundary = match next_visible {
            None => true,
            Some(n) if n.is_lowercase() => false,
            Some(_) => !(c == '.' && j == i && period_is_non_terminal(response, pos)),
        };
        if boundary {
            spans.push((start, end));
            start = end;
        }
        i = j + 1;
    }
    spans.push((start, response.len()));

    spans
        .into_iter()
        .map(|(s, e)| response[s..e].trim())
        .filter(|t| !t.is_empty())
        .enumerate()
        .map(|(index, text)| Sentence::new(index, text))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn texts(s: &str) -> Vec<String> {
        split_sentences(s).into_iter().map(|s| s.text).collect()
    }

    #[test]
    fn basic_examples() {
        assert_eq!(split_sentences("A. B."), vec![Sentence::new(0, "A."), Sentence::new(1, "B.")]);
        assert!(split_sentences("").is_empty());
        assert!(split_sentences("  \n\n ").is_empty());
    }

    #[test]
    fn abbreviation_golden() {
        assert_eq!(
            texts("Dr. Smith won in 1901. He retired."),
            vec!["Dr. Smith won in 1901.", "He retired."]
        );
    }

    #[test]
    fn initials_decimals_and_lowercase_continuations() {
        assert_eq!(
            texts("J. K. Rowling wrote it. Pi is 3.14 roughly! Is it? e.g. this stays."),
            vec!["J. K. Rowling wrote it.", "Pi is 3.14 roughly!", "Is it? e.g. this stays."]
        );
        assert_eq!(
            texts("The U.S. Army arrived. \"Really?\" she asked."),
            vec!["The U.S. Army arrived.", "\"Really?\" she asked."]
        );
    }

    #[test]
    fn list_items_and_paragraphs() {
        let text = "Some conventions include:\n\n1. The Hague Convention (1954)\n2. The Convention on Land (1907)\n\nThey matter. A lot.";
        assert_eq!(
            texts(text),
            vec![
                "Some conventions include:",
                "1. The Hague Convention (1954)",
                "2. The Convention on Land (1907)",
                "They matter.",
                "A lot."
            ]
        );
        assert_eq!(
            texts("Intro line\n- first point\n- second point"),
            vec!["Intro line", "- first point", "- second point"]
        );
    }

    #[test]
    fn soft_wraps_join() {
        assert_eq!(
            texts("This sentence wraps\nacross lines. Next one."),
            vec!["This sentence wraps\nacross lines.", "Next one."]
        );
    }

    #[test]
    fn indices_are_contiguous() {
        let s = split_sentences("One! Two? Three.");
        assert_eq!(s.iter().map(|s| s.index).collect::<Vec<_>>(), vec![0, 1, 2]);
    }

    fn squash(s: &str) -> String {
        s.split_whitespace().collect::<Vec<_>>().join(" ")
    }

    proptest! {
        #[test]
        fn reconstructs_modulo_whitespace(text in "[A-Za-z0-9 .?!,:\\n-]{0,120}") {
            let sentences = split_sentences(&text);
            let joined = sentences.iter().map(|s| s.text.as_str()).collect::<Vec<_>>().join(" ");
            prop_assert_eq!(squash(&joined), squash(&text));
            for (i, s) in sentences.iter().enumerate() {
                prop_assert_eq!(s.index, i);
                prop_assert!(!s.text.trim().is_empty());
            }
            prop_assert_eq!(split_sentences(&text), sentences);
        }
    }
}
