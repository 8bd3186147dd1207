//! JSON-lines files whose first line is a `{"meta": {...}}` header.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Meta {
    pub stage: String,
    pub config_hash: String,
    pub code_version: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<String>,
}

impl Meta {
    pub fn new(stage: &str, config_hash: &str, split: Option<&str>) -> Self {
        Meta {
            stage: stage.to_string(),
            config_hash: config_hash.to_string(),
            code_version: CODE_VERSION.to_string(),
            split: split.map(str::to_string),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum JsonlError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {source}")]
    Parse {
        path: String,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
}

fn io_err(path: &Path, source: std::io::Error) -> JsonlError {
    JsonlError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Serialize)]
struct MetaLine<'a> {
    meta: &'a Meta,
}

pub fn write_jsonl<T: Serialize>(path: &Path, meta: &Meta, items: &[T]) -> Result<(), JsonlError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    let file = fs::File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    let mut put = |v: String| writeln!(w, "{v}").map_err(|e| io_err(path, e));
    put(serde_json::to_string(&MetaLine { meta }).expect("meta serializes"))?;
    for item in items {
        put(serde_json::to_string(item).expect("record serializes"))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

fn is_meta_line(line: &str) -> bool {
    line.trim_start().starts_with("{\"meta\"")
}

/// Reads records, skipping blank lines and the meta header.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, JsonlError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || is_meta_line(line) {
            continue;
        }
        out.push(serde_json::from_str(line).map_err(|source| JsonlError::Parse {
            path: path.display().to_string(),
            line: i + 1,
            source,
        })?);
    }
    Ok(out)
}

pub fn read_meta(path: &Path) -> Result<Option<Meta>, JsonlError> {
    #[derive(Deserialize)]
    struct Wrapped {
        meta: Meta,
    }
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    match text.lines().next() {
        Some(first) if is_meta_line(first) => {
            let w: Wrapped = serde_json::from_str(first).map_err(|source| JsonlError::Parse {
                path: path.display().to_string(),
                line: 1,
                source,
            })?;
            Ok(Some(w.meta))
        }
        _ => Ok(None),
    }
}
