//! Passage retrieval behind the [`Retriever`] trait.
//!
//! [`LexicalRetriever`] is an in-memory inverted index scored with BM25
//! (term overlap weighted by inverse document frequency). Ties are broken
//! by `doc_id` so results are a total order.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RetrieverError {
    #[error("retriever transport error calling {endpoint}: {message}")]
    Transport { endpoint: String, message: String },
    #[error("corpus {path} line {line}: {message}")]
    Corpus { path: String, line: usize, message: String },
    #[error("retriever: {0}")]
    Other(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Passage {
    pub doc_id: String,
    #[serde(default)]
    pub title: String,
    pub text: String,
    pub rank: usize,
    pub score: f64,
}

pub trait Retriever: Send + Sync {
    /// At most `top_k` passages, best first, with ranks `0..n`.
    fn retrieve(&self, query: &str, top_k: usize) -> Result<Vec<Passage>, RetrieverError>;
}

impl<R: Retriever + ?Sized> Retriever for &R {
    fn retrieve(&self, query: &str, top_k: usize) -> Result<Vec<Passage>, RetrieverError> {
        (**self).retrieve(query, top_k)
    }
}

impl<R: Retriever + ?Sized> Retriever for Box<R> {
    fn retrieve(&self, query: &str, top_k: usize) -> Result<Vec<Passage>, RetrieverError> {
        (**self).retrieve(query, top_k)
    }
}

/// One line of a corpus JSONL file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusDoc {
    pub doc_id: String,
    #[serde(default)]
    pub title: String,
    pub text: String,
}

pub fn load_corpus(path: &Path) -> Result<Vec<CorpusDoc>, RetrieverError> {
    let err = |line: usize, message: String| RetrieverError::Corpus {
        path: path.display().to_string(),
        line,
        message,
    };
    let file = fs::File::open(path).map_err(|e| err(0, e.to_string()))?;
    let mut docs = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| err(n + 1, e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        docs.push(serde_json::from_str(&line).map_err(|e| err(n + 1, e.to_string()))?);
    }
    Ok(docs)
}

const STOPWORDS: &[&str] = &[
    "a", "an", "and", "are", "as", "at", "be", "been", "by", "did", "do", "does", "for", "from", "had", "has", "have",
    "he", "her", "his", "in", "is", "it", "its", "of", "on", "or", "she", "that", "the", "their", "there", "they",
    "this", "to", "was", "were", "which", "who", "with",
];

/// Lowercased alphanumeric terms with stopwords removed.
pub fn content_terms(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .filter(|t| !STOPWORDS.contains(&t.as_str()))
        .collect()
}

pub struct LexicalRetriever {
    docs: Vec<CorpusDoc>,
    doc_lengths: Vec<f64>,
    avg_length: f64,
    /// term -> (doc index, term frequency), doc indices ascending
    postings: HashMap<String, Vec<(usize, u32)>>,
    k1: f64,
    b: f64,
}

impl LexicalRetriever {
    pub fn new(docs: Vec<CorpusDoc>) -> Self {
        let mut postings: HashMap<String, Vec<(usize, u32)>> = HashMap::new();
        let mut doc_lengths = Vec::with_capacity(docs.len());
        for (i, doc) in docs.iter().enumerate() {
            let terms = content_terms(&format!("{} {}", doc.title, doc.text));
            doc_lengths.push(terms.len() as f64);
            let mut counts: BTreeMap<String, u32> = BTreeMap::new();
            for t in terms {
                *counts.entry(t).or_default() += 1;
            }
            for (term, tf) in counts {
                postings.entry(term).or_default().push((i, tf));
            }
        }
        let avg_length = if docs.is_empty() {
            0.0
        } else {
            doc_lengths.iter().sum::<f64>() / docs.len() as f64
        };
        Self {
            docs,
            doc_lengths,
            avg_length,
            postings,
            k1: 1.2,
            b: 0.75,
        }
    }

    pub fn from_jsonl(path: &Path) -> Result<Self, RetrieverError> {
        load_corpus(path).map(Self::new)
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    fn idf(&self, doc_freq: usize) -> f64 {
        let n = self.docs.len() as f64;
        let df = doc_freq as f64;
        ((n - df + 0.5) / (df + 0.5) + 1.0).ln()
    }

    /// BM25 scores of every document sharing at least one query term.
    pub fn scores(&self, query: &str) -> Vec<(usize, f64)> {
        let mut query_terms = content_terms(query);
        query_terms.sort();
        query_terms.dedup();
        let mut scores: BTreeMap<usize, f64> = BTreeMap::new();
        for term in &query_terms {
            let Some(list) = self.postings.get(term) else { continue };
            let idf = self.idf(list.len());
            for &(doc, tf) in list {
                let tf = tf as f64;
                let norm = 1.0 - self.b + self.b * self.doc_lengths[doc] / self.avg_length.max(1e-9);
                *scores.entry(doc).or_default() += idf * tf * (self.k1 + 1.0) / (tf + self.k1 * norm);
            }
        }
        scores.into_iter().collect()
    }
}

impl Retriever for LexicalRetriever {
    fn retrieve(&self, query: &str, top_k: usize) -> Result<Vec<Passage>, RetrieverError> {
        let mut scored: Vec<(usize, f64)> = self.scores(query).into_iter().filter(|(_, s)| *s > 0.0).collect();
        scored.sort_by(|a, b| {
            b.1.total_cmp(&a.1)
                .then_with(|| self.docs[a.0].doc_id.cmp(&self.docs[b.0].doc_id))
        });
        Ok(scored
            .into_iter()
            .take(top_k)
            .enumerate()
            .map(|(rank, (i, score))| Passage {
                doc_id: self.docs[i].doc_id.clone(),
                title: self.docs[i].title.clone(),
                text: self.docs[i].text.clone(),
                rank,
                score,
            })
            .collect())
    }
}

/// Remote retriever: `POST {url}` with `{"query", "top_k"}`, answered by a
/// JSON array of `{doc_id, title?, text, score}`.
pub struct HttpRetriever {
    url: String,
    agent: ureq::Agent,
}

#[derive(Deserialize)]
struct RemotePassage {
    doc_id: String,
    #[serde(default)]
    title: String,
    text: String,
    #[serde(default)]
    score: f64,
}

impl HttpRetriever {
    pub fn new(url: impl Into<String>) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(60)))
            .build()
            .into();
        Self { url: url.into(), agent }
    }
}

impl Retriever for HttpRetriever {
    fn retrieve(&self, query: &str, top_k: usize) -> Result<Vec<Passage>, RetrieverError> {
        let transport = |message: String| RetrieverError::Transport {
            endpoint: self.url.clone(),
            message,
        };
        let mut response = self
            .agent
            .post(&self.url)
            .send_json(serde_json::json!({"query": query, "top_k": top_k}))
            .map_err(|e| transport(e.to_string()))?;
        let mut remote: Vec<RemotePassage> = response.body_mut().read_json().map_err(|e| transport(e.to_string()))?;
        remote.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.doc_id.cmp(&b.doc_id)));
        Ok(remote
            .into_iter()
            .take(top_k)
            .enumerate()
            .map(|(rank, p)| Passage {
                doc_id: p.doc_id,
                title: p.title,
                text: p.text,
                rank,
                score: p.score,
            })
            .collect())
    }
}

/// A fixed-answer rule for [`ScriptedRetriever`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalRule {
    /// Fires when every needle occurs in the lowercased query.
    pub contains: Vec<String>,
    pub passages: Vec<CorpusDoc>,
}

/// Returns canned passages per query; unmatched queries get nothing.
#[derive(Debug, Clone, Default)]
pub struct ScriptedRetriever {
    rules: Vec<RetrievalRule>,
}

impl ScriptedRetriever {
    pub fn new(rules: Vec<RetrievalRule>) -> Self {
        Self { rules }
    }

    pub fn from_jsonl(path: &Path) -> Result<Self, RetrieverError> {
        let text = fs::read_to_string(path).map_err(|e| RetrieverError::Other(format!("{}: {e}", path.display())))?;
        let mut rules = Vec::new();
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            rules.push(serde_json::from_str(line).map_err(|e| RetrieverError::Corpus {
                path: path.display().to_string(),
                line: n + 1,
                message: e.to_string(),
            })?);
        }
        Ok(Self { rules })
    }
}

impl Retriever for ScriptedRetriever {
    fn retrieve(&self, query: &str, top_k: usize) -> Result<Vec<Passage>, RetrieverError> {
        let lower = query.to_lowercase();
        let Some(rule) = self
            .rules
            .iter()
            .find(|r| r.contains.iter().all(|n| lower.contains(&n.to_lowercase())))
        else {
            return Ok(Vec::new());
        };
        let n = rule.passages.len();
        Ok(rule
            .passages
            .iter()
            .take(top_k)
            .enumerate()
            .map(|(rank, d)| Passage {
                doc_id: d.doc_id.clone(),
                title: d.title.clone(),
                text: d.text.clone(),
                rank,
                score: (n - rank) as f64,
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doc(id: &str, text: &str) -> CorpusDoc {
        CorpusDoc {
            doc_id: id.into(),
            title: String::new(),
            text: text.into(),
        }
    }

    #[test]
    fn single_match_ranks_first() {
        let r = LexicalRetriever::new(vec![
            doc("a", "The Hague Convention of 1907 concerned land warfare."),
            doc("b", "Einstein received the Nobel Prize in Physics."),
        ]);
        let hits = r.retrieve("Hague Convention 1907", 3).unwrap();
        assert_eq!(hits.len(), 1);
        assert_eq!((hits[0].doc_id.as_str(), hits[0].rank), ("a", 0));
    }

    #[test]
    fn no_overlap_returns_nothing() {
        let r = LexicalRetriever::new(vec![doc("a", "alpha beta")]);
        assert!(r.retrieve("gamma delta", 3).unwrap().is_empty());
        assert!(r.retrieve("the of and", 3).unwrap().is_empty());
        assert!(LexicalRetriever::new(vec![]).retrieve("alpha", 3).unwrap().is_empty());
    }

    #[test]
    fn ties_break_by_doc_id() {
        let r = LexicalRetriever::new(vec![
            doc("zeta", "river delta mud"),
            doc("alpha", "river delta mud"),
            doc("mid", "unrelated words here"),
        ]);
        let hits = r.retrieve("river delta", 3).unwrap();
        assert_eq!(hits.iter().map(|p| p.doc_id.as_str()).collect::<Vec<_>>(), vec!["alpha", "zeta"]);
        assert_eq!(hits[0].score, hits[1].score);
        assert_eq!(hits.iter().map(|p| p.rank).collect::<Vec<_>>(), vec![0, 1]);
    }

    #[test]
    fn truncates_to_top_k_in_score_order() {
        let docs = (0..10)
            .map(|i| doc(&format!("d{i}"), &"apple ".repeat(i + 1)))
            .collect();
        let r = LexicalRetriever::new(docs);
        let hits = r.retrieve("apple", 3).unwrap();
        assert_eq!(hits.len(), 3);
        assert!(hits.windows(2).all(|w| w[0].score >= w[1].score));
    }

    #[test]
    fn rarer_terms_weigh_more() {
        let r = LexicalRetriever::new(vec![
            doc("common", "war war"),
            doc("rare", "armistice"),
            doc("x", "war"),
            doc("y", "war"),
        ]);
        let hits = r.retrieve("war armistice", 1).unwrap();
        assert_eq!(hits[0].doc_id, "rare");
    }

    #[test]
    fn corpus_errors_name_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        fs::write(&path, "{\"doc_id\":\"a\",\"text\":\"x\"}\n{\"doc_id\":\n").unwrap();
        match LexicalRetriever::from_jsonl(&path) {
            Err(RetrieverError::Corpus { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {:?}", other.map(|r| r.len())),
        }
    }

    #[test]
    fn scripted_retriever_matches_needles() {
        let r = ScriptedRetriever::new(vec![RetrievalRule {
            contains: vec!["hague".into()],
            passages: vec![doc("h1", "x"), doc("h2", "y")],
        }]);
        assert_eq!(r.retrieve("The Hague", 1).unwrap().len(), 1);
        assert!(r.retrieve("Paris", 3).unwrap().is_empty());
    }
}
