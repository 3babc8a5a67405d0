//! File helpers shared by the loaders and writers.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

/// Writes `bytes` to a sibling temp file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let name = path
        .file_name()
        .ok_or_else(|| Error::Input(format!("not a file path: {}", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", name.to_string_lossy()));
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// One sentence per non-empty line.
pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    Ok(read_to_string(path)?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect())
}

pub fn write_lines<S: AsRef<str>>(path: &Path, lines: &[S]) -> Result<()> {
    let mut out = String::new();
    for l in lines {
        out.push_str(l.as_ref());
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

/// Parses JSON-Lines, skipping blank lines. A missing field surfaces as
/// [`Error::Schema`] naming that field.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = read_to_string(path)?;
    parse_jsonl(&text, &path.display().to_string())
}

pub fn parse_jsonl<T: DeserializeOwned>(text: &str, origin: &str) -> Result<Vec<T>> {
    Ok(parse_jsonl_numbered(text, origin)?.into_iter().map(|(_, r)| r).collect())
}

/// Like [`parse_jsonl`] but keeps each record's 1-based line number.
pub fn parse_jsonl_numbered<T: DeserializeOwned>(text: &str, origin: &str) -> Result<Vec<(usize, T)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: origin.to_string(),
            line: i + 1,
            message: e.to_string(),
        })?;
        let record = serde_json::from_value(value).map_err(|e| {
            let msg = e.to_string();
            match missing_field(&msg) {
                Some(field) => Error::Schema {
                    path: origin.to_string(),
                    line: i + 1,
                    field,
                },
                None => Error::Parse {
                    path: origin.to_string(),
                    line: i + 1,
                    message: msg,
                },
            }
        })?;
        out.push((i + 1, record));
    }
    Ok(out)
}

fn missing_field(msg: &str) -> Option<String> {
    let rest = msg.strip_prefix("missing field `")?;
    Some(rest.split('`').next()?.to_string())
}

pub fn to_jsonl<T: Serialize>(records: &[T]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("records serialize"));
        out.push('\n');
    }
    out
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    write_atomic(path, to_jsonl(records).as_bytes())
}
