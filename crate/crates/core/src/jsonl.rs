//! Line-delimited JSON helpers shared by every file format in the crate.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum JsonlError {
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("{path} line {line}, column {column}: {message}")]
    Parse {
        path: String,
        line: usize,
        column: usize,
        message: String,
    },
}

impl JsonlError {
    fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        JsonlError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        }
    }
}

/// Parses one value per non-blank line. `origin` names the source in errors.
pub fn parse_jsonl<T: DeserializeOwned>(reader: impl BufRead, origin: &str) -> Result<Vec<T>, JsonlError> {
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| JsonlError::Io {
            path: origin.to_string(),
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line).map_err(|e| JsonlError::Parse {
            path: origin.to_string(),
            line: n + 1,
            column: e.column(),
            message: e.to_string(),
        })?;
        out.push(value);
    }
    Ok(out)
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, JsonlError> {
    let file = File::open(path).map_err(|e| JsonlError::io(path, e))?;
    parse_jsonl(BufReader::new(file), &path.display().to_string())
}

pub fn write_jsonl_to<T: Serialize>(mut writer: impl Write, items: &[T]) -> std::io::Result<()> {
    for item in items {
        serde_json::to_writer(&mut writer, item)?;
        writer.write_all(b"\n")?;
    }
    writer.flush()
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), JsonlError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| JsonlError::io(path, e))?;
    }
    let file = File::create(path).map_err(|e| JsonlError::io(path, e))?;
    write_jsonl_to(BufWriter::new(file), items).map_err(|e| JsonlError::io(path, e))
}
