//! On-disk record store: capture sessions, listing, pinning, promotion with
//! redaction, and eviction.
//!
//! Layout under the store root:
//! `incidents/<id>/` live records, `promoted/<id>/` redacted long-term
//! copies, `replays/<id>/` replay reports.

mod lock;
mod redact;
mod scenario;
mod session;

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use chrono::Duration;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use lock::{lock_state, pid_alive, LockInfo, LockState, SessionLock, LOCK_FILE};
pub use redact::{apply_selectors, promote, FieldSelector, Promotion, REDACTED};
pub use scenario::{run_scenario, Scenario, ScenarioEvent};
pub use session::{resume_investigation, start_investigation, CaptureSession, SessionState};

use crate::codes::Code;
use crate::record::{
    write_json_file, InvestigationId, Metadata, ParseError, Timestamp, Violation, ENVELOPE_FILE,
    METADATA_FILE, VERDICT_FILE,
};

pub const ROOT_ENV: &str = "AER_ROOT";
pub const DEFAULT_ROOT: &str = "./agent-executions";
pub const INCIDENTS_DIR: &str = "incidents";
pub const PROMOTED_DIR: &str = "promoted";
pub const REPLAYS_DIR: &str = "replays";

#[derive(Debug, Clone)]
pub struct StoreConfig {
    pub root: PathBuf,
    pub max_unpinned: usize,
    pub max_age_days: u32,
    pub redaction_rules: Vec<FieldSelector>,
    /// Tool outputs larger than this are replaced by `{"truncated":true,"bytes":N}`.
    pub max_output_bytes: Option<usize>,
    /// Allow a new session to take over a lock whose holder process is gone.
    pub break_stale_lock: bool,
}

impl StoreConfig {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        StoreConfig {
            root: root.into(),
            max_unpinned: 50,
            max_age_days: 14,
            redaction_rules: Vec::new(),
            max_output_bytes: None,
            break_stale_lock: false,
        }
    }

    /// Root from an explicit value, else `AER_ROOT`, else the default.
    pub fn resolve_root(explicit: Option<&Path>) -> PathBuf {
        match explicit {
            Some(p) => p.to_path_buf(),
            None => std::env::var_os(ROOT_ENV)
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from(DEFAULT_ROOT)),
        }
    }

    pub fn incidents_dir(&self) -> PathBuf {
        self.root.join(INCIDENTS_DIR)
    }

    pub fn record_dir(&self, id: &str) -> PathBuf {
        self.incidents_dir().join(id)
    }

    pub fn promoted_dir(&self, id: &str) -> PathBuf {
        self.root.join(PROMOTED_DIR).join(id)
    }

    pub fn replays_dir(&self, id: &str) -> PathBuf {
        self.root.join(REPLAYS_DIR).join(id)
    }

    /// The record directory for `id`, or `NOT_FOUND`.
    pub fn existing_record_dir(&self, id: &str) -> Result<PathBuf, StoreError> {
        if !InvestigationId::is_valid(id) {
            return Err(StoreError::NotFound(id.to_string()));
        }
        let dir = self.record_dir(id);
        if dir.join(ENVELOPE_FILE).is_file() {
            Ok(dir)
        } else {
            Err(StoreError::NotFound(id.to_string()))
        }
    }
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{}", describe_violations(.0))]
    Invalid(Vec<Violation>),
    #[error("investigation {0} has an open session")]
    SessionConflict(String),
    #[error("investigation {0} already exists")]
    InvestigationExists(String),
    #[error("{op} not allowed in session state {state}")]
    SessionState { op: &'static str, state: SessionState },
    #[error("session already finalized")]
    SessionFinalized,
    #[error("no record {0}")]
    NotFound(String),
    #[error("metadata.fidelity is written only by the reconciler")]
    FidelityWriteForbidden,
    #[error("metadata.{0} is managed by the store")]
    MetadataFieldReserved(String),
    #[error("record is invalid: {}", describe_violations(.0))]
    RecordInvalid(Vec<Violation>),
    #[error("redaction produces an invalid record: {0}")]
    RedactionBreaksSchema(String),
    #[error("invalid field selector {0:?}")]
    SelectorInvalid(String),
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error("{0}")]
    Io(#[from] io::Error),
}

fn describe_violations(violations: &[Violation]) -> String {
    violations
        .iter()
        .map(|v| format!("{} ({} {}): {}", v.code, v.file, v.locator, v.message))
        .collect::<Vec<_>>()
        .join("; ")
}

impl StoreError {
    /// Shared error code string; for validation failures, the first violation's.
    pub fn code(&self) -> Code {
        match self {
            StoreError::Invalid(v) => v.first().map(|v| v.code).unwrap_or(Code::RecordInvalid),
            StoreError::SessionConflict(_) => Code::SessionConflict,
            StoreError::InvestigationExists(_) => Code::InvestigationExists,
            StoreError::SessionState { .. } => Code::SessionState,
            StoreError::SessionFinalized => Code::SessionFinalized,
            StoreError::NotFound(_) => Code::NotFound,
            StoreError::FidelityWriteForbidden => Code::FidelityWriteForbidden,
            StoreError::MetadataFieldReserved(_) => Code::MetadataFieldReserved,
            StoreError::RecordInvalid(_) => Code::RecordInvalid,
            StoreError::RedactionBreaksSchema(_) => Code::RedactionBreaksSchema,
            StoreError::SelectorInvalid(_) => Code::SelectorInvalid,
            StoreError::Parse(_) => Code::ParseError,
            StoreError::Io(_) => Code::Io,
        }
    }

    pub fn violations(&self) -> &[Violation] {
        match self {
            StoreError::Invalid(v) | StoreError::RecordInvalid(v) => v,
            _ => &[],
        }
    }
}

fn read_metadata(dir: &Path) -> Result<Metadata, StoreError> {
    let path = dir.join(METADATA_FILE);
    let text = fs::read_to_string(&path)?;
    serde_json::from_str(&text).map_err(|e| {
        StoreError::Parse(ParseError::Malformed {
            file: METADATA_FILE.to_string(),
            line: Some(e.line()),
            message: e.to_string(),
        })
    })
}

/// Directory names under `incidents/`, sorted.
fn incident_ids(config: &StoreConfig) -> io::Result<Vec<String>> {
    let dir = config.incidents_dir();
    let entries = match fs::read_dir(&dir) {
        Ok(e) => e,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e),
    };
    let mut ids = Vec::new();
    for entry in entries {
        let entry = entry?;
        if entry.file_type()?.is_dir() {
            ids.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    ids.sort();
    Ok(ids)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordSummary {
    pub investigation_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub created_at: Option<Timestamp>,
    pub pinned: bool,
    pub promoted: bool,
    pub has_verdict: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fidelity: Option<f64>,
    /// Why the entry could not be read in full.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub degraded: Option<String>,
}

/// One entry per incident directory, newest first; unreadable ones are
/// reported with a `degraded` note after the readable ones.
pub fn list_records(config: &StoreConfig) -> io::Result<Vec<RecordSummary>> {
    let mut out = Vec::new();
    for id in incident_ids(config)? {
        let dir = config.record_dir(&id);
        let has_verdict = dir.join(VERDICT_FILE).is_file();
        let summary = match read_metadata(&dir) {
            Ok(m) => RecordSummary {
                investigation_id: id,
                created_at: Some(m.created_at),
                pinned: m.pinned,
                promoted: m.promoted,
                has_verdict,
                fidelity: m.fidelity.map(|f| f.score),
                degraded: None,
            },
            Err(e) => RecordSummary {
                investigation_id: id,
                created_at: None,
                pinned: false,
                promoted: false,
                has_verdict,
                fidelity: None,
                degraded: Some(format!("metadata.json: {e}")),
            },
        };
        out.push(summary);
    }
    out.sort_by(|a, b| match (a.created_at, b.created_at) {
        (Some(x), Some(y)) => y.cmp(&x).then_with(|| a.investigation_id.cmp(&b.investigation_id)),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => a.investigation_id.cmp(&b.investigation_id),
    });
    Ok(out)
}

pub fn set_pinned(config: &StoreConfig, id: &str, pinned: bool) -> Result<Metadata, StoreError> {
    let dir = config.existing_record_dir(id)?;
    let mut metadata = read_metadata(&dir)?;
    metadata.pinned = pinned;
    write_json_file(&dir.join(METADATA_FILE), &metadata)?;
    Ok(metadata)
}

pub fn pin(config: &StoreConfig, id: &str) -> Result<Metadata, StoreError> {
    set_pinned(config, id, true)
}

pub fn unpin(config: &StoreConfig, id: &str) -> Result<Metadata, StoreError> {
    set_pinned(config, id, false)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvictionReason {
    /// Removed: older than `max_age_days`.
    Age,
    /// Removed: oldest beyond the `max_unpinned` cap.
    Count,
    Pinned,
    Promoted,
    OpenSession,
    /// Metadata unreadable; never removed automatically.
    Unreadable,
    WithinPolicy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvictionEntry {
    pub investigation_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub created_at: Option<Timestamp>,
    pub reason: EvictionReason,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvictionPlan {
    pub dry_run: bool,
    pub removed: Vec<EvictionEntry>,
    pub kept: Vec<EvictionEntry>,
}

/// Removes unpinned records older than `max_age_days`, then the oldest
/// remaining unpinned records beyond `max_unpinned`. Pinned records,
/// records marked promoted, records with a live session lock and records
/// with unreadable metadata are never candidates. The `promoted/` tree is
/// not touched.
pub fn evict(config: &StoreConfig, now: Timestamp, dry_run: bool) -> Result<EvictionPlan, StoreError> {
    let max_age = Duration::days(i64::from(config.max_age_days));
    let mut kept = Vec::new();
    let mut candidates = Vec::new();
    for id in incident_ids(config)? {
        let dir = config.record_dir(&id);
        let entry = |created_at, reason| EvictionEntry {
            investigation_id: id.clone(),
            created_at,
            reason,
        };
        let metadata = match read_metadata(&dir) {
            Ok(m) => m,
            Err(_) => {
                kept.push(entry(None, EvictionReason::Unreadable));
                continue;
            }
        };
        let created = Some(metadata.created_at);
        if metadata.pinned {
            kept.push(entry(created, EvictionReason::Pinned));
        } else if metadata.promoted {
            kept.push(entry(created, EvictionReason::Promoted));
        } else if matches!(lock_state(&dir), LockState::Held(_) | LockState::Corrupt) {
            kept.push(entry(created, EvictionReason::OpenSession));
        } else {
            candidates.push(entry(created, EvictionReason::WithinPolicy));
        }
    }
    // oldest first
    candidates.sort_by(|a, b| {
        a.created_at
            .cmp(&b.created_at)
            .then_with(|| a.investigation_id.cmp(&b.investigation_id))
    });

    let mut removed = Vec::new();
    let mut survivors = Vec::new();
    for mut c in candidates {
        let created = c.created_at.expect("candidates have metadata");
        if now.0 - created.0 > max_age {
            c.reason = EvictionReason::Age;
            removed.push(c);
        } else {
            survivors.push(c);
        }
    }
    let excess = survivors.len().saturating_sub(config.max_unpinned);
    for mut c in survivors.drain(..excess) {
        c.reason = EvictionReason::Count;
        removed.push(c);
    }
    kept.extend(survivors);
    kept.sort_by(|a, b| a.investigation_id.cmp(&b.investigation_id));

    if !dry_run {
        for r in &removed {
            fs::remove_dir_all(config.record_dir(&r.investigation_id))?;
        }
    }
    Ok(EvictionPlan {
        dry_run,
        removed,
        kept,
    })
}
