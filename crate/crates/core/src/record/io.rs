use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Value};
use thiserror::Error;

use super::canonical::to_canonical_string;
use super::{Envelope, ExecutionRecord, Metadata, Plan, Step, Verdict};

pub const ENVELOPE_FILE: &str = "envelope.json";
pub const PLANS_FILE: &str = "plans.jsonl";
pub const STEPS_FILE: &str = "steps.jsonl";
pub const VERDICT_FILE: &str = "verdict.json";
pub const METADATA_FILE: &str = "metadata.json";

#[derive(Debug, Error)]
pub enum ParseError {
    #[error("{path}: record directory not found")]
    NotFound { path: PathBuf },
    #[error("{path}: envelope.json missing")]
    EnvelopeMissing { path: PathBuf },
    #[error("{file}{}: {message}", line.map(|l| format!(" line {l}")).unwrap_or_default())]
    Malformed {
        file: String,
        line: Option<usize>,
        message: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

impl ParseError {
    pub fn file(&self) -> Option<&str> {
        match self {
            ParseError::Malformed { file, .. } => Some(file),
            ParseError::EnvelopeMissing { .. } => Some(ENVELOPE_FILE),
            _ => None,
        }
    }

    pub fn line(&self) -> Option<usize> {
        match self {
            ParseError::Malformed { line, .. } => *line,
            _ => None,
        }
    }
}

fn io_err(path: &Path, source: io::Error) -> ParseError {
    ParseError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn file_name(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn read_optional(path: &Path) -> Result<Option<String>, ParseError> {
    match fs::read_to_string(path) {
        Ok(text) => Ok(Some(text)),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(io_err(path, e)),
    }
}

fn parse_single<T: DeserializeOwned>(path: &Path) -> Result<Option<T>, ParseError> {
    let Some(text) = read_optional(path)? else {
        return Ok(None);
    };
    serde_json::from_str(&text)
        .map(Some)
        .map_err(|e| ParseError::Malformed {
            file: file_name(path),
            line: Some(e.line()),
            message: e.to_string(),
        })
}

/// Reads a JSONL file. A final line without its terminating newline that
/// fails to parse is treated as an in-progress append and dropped; the
/// returned flag reports whether that happened.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<(Vec<T>, bool), ParseError> {
    let Some(text) = read_optional(path)? else {
        return Ok((Vec::new(), false));
    };
    let complete = text.ends_with('\n');
    let lines: Vec<&str> = text.split('\n').collect();
    let last_index = lines.len() - 1;
    let mut items = Vec::new();
    let mut dropped_partial = false;
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(line) {
            Ok(item) => items.push(item),
            Err(_) if i == last_index && !complete => dropped_partial = true,
            Err(e) => {
                return Err(ParseError::Malformed {
                    file: file_name(path),
                    line: Some(i + 1),
                    message: e.to_string(),
                })
            }
        }
    }
    Ok((items, dropped_partial))
}

/// Assembles a record from its directory. Missing plans, steps, verdict or
/// metadata are tolerated so crashed sessions stay analyzable.
pub fn parse_record(dir: &Path) -> Result<ExecutionRecord, ParseError> {
    if !dir.is_dir() {
        return Err(ParseError::NotFound {
            path: dir.to_path_buf(),
        });
    }
    let envelope: Envelope =
        parse_single(&dir.join(ENVELOPE_FILE))?.ok_or_else(|| ParseError::EnvelopeMissing {
            path: dir.to_path_buf(),
        })?;
    let (plans, _) = read_jsonl::<Plan>(&dir.join(PLANS_FILE))?;
    let (steps, _) = read_jsonl::<Step>(&dir.join(STEPS_FILE))?;
    let verdict: Option<Verdict> = parse_single(&dir.join(VERDICT_FILE))?;
    let metadata: Option<Metadata> = parse_single(&dir.join(METADATA_FILE))?;
    Ok(ExecutionRecord {
        envelope,
        plans,
        steps,
        verdict,
        metadata,
        dir_name: dir.file_name().map(|n| n.to_string_lossy().into_owned()),
    })
}

/// Canonical single-object file contents: canonical JSON plus `\n`.
pub(crate) fn canonical_line<T: Serialize>(value: &T) -> io::Result<String> {
    let mut text =
        to_canonical_string(value).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
    text.push('\n');
    Ok(text)
}

/// Atomically replaces `path` with the canonical serialization of `value`.
pub fn write_json_file<T: Serialize>(path: &Path, value: &T) -> io::Result<()> {
    let text = canonical_line(value)?;
    let tmp = path.with_extension("json.tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(text.as_bytes())?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

/// Writes every present member of the record into `dir` in canonical form.
pub fn write_record(dir: &Path, record: &ExecutionRecord) -> io::Result<()> {
    fs::create_dir_all(dir)?;
    write_json_file(&dir.join(ENVELOPE_FILE), &record.envelope)?;
    if !record.plans.is_empty() {
        fs::write(dir.join(PLANS_FILE), jsonl(&record.plans)?)?;
    }
    if !record.steps.is_empty() {
        fs::write(dir.join(STEPS_FILE), jsonl(&record.steps)?)?;
    }
    if let Some(verdict) = &record.verdict {
        write_json_file(&dir.join(VERDICT_FILE), verdict)?;
    }
    if let Some(metadata) = &record.metadata {
        write_json_file(&dir.join(METADATA_FILE), metadata)?;
    }
    Ok(())
}

pub(crate) fn jsonl<T: Serialize>(items: &[T]) -> io::Result<String> {
    let mut out = String::new();
    for item in items {
        out.push_str(&canonical_line(item)?);
    }
    Ok(out)
}

/// The whole record as one JSON document keyed by member name. Used by
/// field selectors and the query runner.
pub fn record_to_json(record: &ExecutionRecord) -> Value {
    json!({
        "envelope": record.envelope,
        "plans": record.plans,
        "steps": record.steps,
        "verdict": record.verdict,
        "metadata": record.metadata,
    })
}
