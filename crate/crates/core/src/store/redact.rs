//! Field selectors and promotion of redacted copies.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Serialize;
use serde_json::Value;

use super::{read_metadata, StoreConfig, StoreError};
use crate::record::{
    canonical_line, jsonl, parse_record, validate_record, write_json_file, Envelope,
    ExecutionRecord, Plan, Step, Verdict, ENVELOPE_FILE, METADATA_FILE, PLANS_FILE, STEPS_FILE,
    VERDICT_FILE,
};

pub const REDACTED: &str = "[REDACTED]";

const REDACTABLE_MEMBERS: &[&str] = &["envelope", "plans", "steps", "verdict"];

/// Dotted path into the record's JSON shape, `*` matching every element of
/// an array (or every value of an object), e.g. `steps.*.tool_calls.*.output`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldSelector {
    segments: Vec<String>,
}

impl FieldSelector {
    pub fn parse(text: &str) -> Result<Self, StoreError> {
        let segments: Vec<String> = text.split('.').map(str::to_string).collect();
        if segments.iter().any(|s| s.is_empty()) || !REDACTABLE_MEMBERS.contains(&segments[0].as_str()) {
            return Err(StoreError::SelectorInvalid(text.to_string()));
        }
        Ok(FieldSelector { segments })
    }

    pub fn member(&self) -> &str {
        &self.segments[0]
    }

    /// Replaces every matched value in `root` (the whole-record JSON) with
    /// [`REDACTED`]; returns the number of replacements.
    pub fn redact(&self, root: &mut Value) -> usize {
        redact_at(root, &self.segments)
    }
}

impl FromStr for FieldSelector {
    type Err = StoreError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        FieldSelector::parse(s)
    }
}

impl fmt::Display for FieldSelector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.segments.join("."))
    }
}

fn redact_at(value: &mut Value, path: &[String]) -> usize {
    let Some((head, rest)) = path.split_first() else {
        *value = Value::String(REDACTED.to_string());
        return 1;
    };
    match value {
        Value::Array(items) if head == "*" => items.iter_mut().map(|v| redact_at(v, rest)).sum(),
        Value::Array(items) => match head.parse::<usize>().ok().and_then(|i| items.get_mut(i)) {
            Some(v) => redact_at(v, rest),
            None => 0,
        },
        Value::Object(map) if head == "*" => map.values_mut().map(|v| redact_at(v, rest)).sum(),
        Value::Object(map) => match map.get_mut(head) {
            Some(v) => redact_at(v, rest),
            None => 0,
        },
        _ => 0,
    }
}

/// Applies every selector to the whole-record JSON; returns match count.
pub fn apply_selectors(record_json: &mut Value, selectors: &[FieldSelector]) -> usize {
    selectors.iter().map(|s| s.redact(record_json)).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Promotion {
    pub investigation_id: String,
    pub path: PathBuf,
    pub redacted_values: usize,
    pub dry_run: bool,
}

fn member_json(record: &ExecutionRecord) -> Value {
    serde_json::json!({
        "envelope": record.envelope,
        "plans": record.plans,
        "steps": record.steps,
        "verdict": record.verdict,
    })
}

fn rebuild(original: &ExecutionRecord, redacted: Value) -> Result<ExecutionRecord, serde_json::Error> {
    let mut map = match redacted {
        Value::Object(m) => m,
        _ => unreachable!("member_json builds an object"),
    };
    let mut take = |k: &str| map.remove(k).unwrap_or(Value::Null);
    Ok(ExecutionRecord {
        envelope: serde_json::from_value::<Envelope>(take("envelope"))?,
        plans: serde_json::from_value::<Vec<Plan>>(take("plans"))?,
        steps: serde_json::from_value::<Vec<Step>>(take("steps"))?,
        verdict: serde_json::from_value::<Option<Verdict>>(take("verdict"))?,
        metadata: original.metadata.clone(),
        dir_name: original.dir_name.clone(),
    })
}

/// Copies a valid record to `promoted/<id>/` with redaction rules applied
/// and marks it promoted in both places. Files no rule touched are copied
/// byte for byte. A promotion whose redacted copy would not validate is
/// refused, as is an invalid source record.
pub fn promote(config: &StoreConfig, id: &str, dry_run: bool) -> Result<Promotion, StoreError> {
    let src = config.existing_record_dir(id)?;
    let record = parse_record(&src)?;
    let violations = validate_record(&record);
    if !violations.is_empty() {
        return Err(StoreError::RecordInvalid(violations));
    }
    let before = member_json(&record);
    let mut after = before.clone();
    let redacted_values = apply_selectors(&mut after, &config.redaction_rules);
    let redacted = rebuild(&record, after.clone())
        .map_err(|e| StoreError::RedactionBreaksSchema(e.to_string()))?;
    if let Some(first) = validate_record(&redacted).first() {
        return Err(StoreError::RedactionBreaksSchema(format!(
            "{} at {} {}",
            first.code, first.file, first.locator
        )));
    }

    let dest = config.promoted_dir(id);
    let outcome = Promotion {
        investigation_id: id.to_string(),
        path: dest.clone(),
        redacted_values,
        dry_run,
    };
    if dry_run {
        return Ok(outcome);
    }

    let mut metadata = read_metadata(&src)?;
    metadata.promoted = true;

    let staging = dest.with_file_name(format!(".{id}.staging"));
    if staging.exists() {
        fs::remove_dir_all(&staging)?;
    }
    fs::create_dir_all(&staging)?;
    let changed = |member: &str| before.get(member) != after.get(member);
    let copy_or_write = |file: &str, member: &str, text: Option<String>| -> Result<(), StoreError> {
        let from = src.join(file);
        let to = staging.join(file);
        if !changed(member) {
            if from.exists() {
                fs::copy(&from, &to)?;
            }
        } else if let Some(text) = text {
            fs::write(&to, text)?;
        }
        Ok(())
    };
    copy_or_write(ENVELOPE_FILE, "envelope", Some(canonical_line(&redacted.envelope)?))?;
    copy_or_write(PLANS_FILE, "plans", Some(jsonl(&redacted.plans)?))?;
    copy_or_write(STEPS_FILE, "steps", Some(jsonl(&redacted.steps)?))?;
    let verdict_text = match &redacted.verdict {
        Some(v) => Some(canonical_line(v)?),
        None => None,
    };
    copy_or_write(VERDICT_FILE, "verdict", verdict_text)?;
    write_json_file(&staging.join(METADATA_FILE), &metadata)?;

    replace_dir(&staging, &dest)?;
    write_json_file(&src.join(METADATA_FILE), &metadata)?;
    Ok(outcome)
}

fn replace_dir(staging: &Path, dest: &Path) -> std::io::Result<()> {
    if dest.exists() {
        fs::remove_dir_all(dest)?;
    }
    fs::rename(staging, dest)
}
