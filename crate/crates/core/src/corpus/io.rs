use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use super::document::{MultiLevelDocument, RawDocument};
use crate::error::{Error, Result};

/// Parses one JSON record per non-blank line.
pub fn parse_jsonl<T: DeserializeOwned>(path: &Path, text: &str) -> Result<Vec<T>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_jsonl(path, &text)
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(|e| Error::invalid(e.to_string()))?;
        out.push(b'\n');
    }
    fs::File::create(path)
        .and_then(|mut f| f.write_all(&out))
        .map_err(|e| Error::io(path, e))
}

pub fn load_jsonl(path: &Path) -> Result<Vec<RawDocument>> {
    read_jsonl(path)
}

pub fn save_jsonl(path: &Path, documents: &[RawDocument]) -> Result<()> {
    write_jsonl(path, documents)
}

/// Loads and tokenizes a corpus file.
pub fn load_corpus(path: &Path, max_segment_tokens: usize) -> Result<Vec<MultiLevelDocument>> {
    Ok(load_jsonl(path)?
        .into_iter()
        .map(|r| MultiLevelDocument::from_raw(r, max_segment_tokens))
        .collect())
}
