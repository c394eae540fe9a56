//! Writer API used while an agent runs.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};

use super::lock::{lock_state, LockState, SessionLock, LOCK_FILE};
use super::{read_metadata, StoreConfig, StoreError};
use crate::codes::Code;
use crate::record::canonical::canonical_text;
use crate::record::validate::{
    check_envelope, check_metadata, check_plan, check_step, check_verdict, StepIndex,
};
use crate::record::{
    parse_record, validate_record, write_json_file, Envelope, InvestigationId, Metadata, Plan,
    Step, Timestamp, Verdict, Violation, ENVELOPE_FILE, METADATA_FILE, PLANS_FILE, STEPS_FILE,
    VERDICT_FILE,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionState {
    Open,
    VerdictRecorded,
    Finalized,
}

impl fmt::Display for SessionState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SessionState::Open => "open",
            SessionState::VerdictRecorded => "verdict_recorded",
            SessionState::Finalized => "finalized",
        })
    }
}

/// An open capture for one investigation. Holds the directory lock until
/// [`CaptureSession::finalize`] or drop.
#[derive(Debug)]
pub struct CaptureSession {
    id: InvestigationId,
    dir: PathBuf,
    state: SessionState,
    next_plan_version: u32,
    next_sequence: u32,
    plan_versions: BTreeSet<u32>,
    steps: StepIndex,
    step_ids: HashSet<String>,
    metadata: Metadata,
    max_output_bytes: Option<usize>,
    lock: SessionLock,
}

/// Takes the directory lock, breaking a stale one when configured to.
fn acquire_lock(config: &StoreConfig, dir: &Path, id: &str) -> Result<SessionLock, StoreError> {
    for _ in 0..2 {
        if let Some(lock) = SessionLock::try_acquire(dir)? {
            return Ok(lock);
        }
        match lock_state(dir) {
            LockState::Stale(_) if config.break_stale_lock => {
                match fs::remove_file(dir.join(LOCK_FILE)) {
                    Err(e) if e.kind() != std::io::ErrorKind::NotFound => return Err(e.into()),
                    _ => {}
                }
            }
            _ => return Err(StoreError::SessionConflict(id.to_string())),
        }
    }
    Err(StoreError::SessionConflict(id.to_string()))
}

fn reject(violations: Vec<Violation>) -> Result<(), StoreError> {
    if violations.is_empty() {
        Ok(())
    } else {
        Err(StoreError::Invalid(violations))
    }
}

/// Creates `incidents/<id>/`, writes the envelope and initial metadata and
/// takes the lock. A directory without an envelope may pre-exist.
pub fn start_investigation(config: &StoreConfig, envelope: Envelope) -> Result<CaptureSession, StoreError> {
    let id = envelope.investigation_id.clone();
    reject(check_envelope(&envelope, None))?;
    let dir = config.record_dir(id.as_str());
    fs::create_dir_all(&dir)?;
    let lock = acquire_lock(config, &dir, id.as_str())?;
    if dir.join(ENVELOPE_FILE).exists() {
        return Err(StoreError::InvestigationExists(id.to_string()));
    }
    let metadata = Metadata::new(Timestamp::now());
    write_json_file(&dir.join(METADATA_FILE), &metadata)?;
    write_json_file(&dir.join(ENVELOPE_FILE), &envelope)?;
    Ok(CaptureSession {
        id,
        dir,
        state: SessionState::Open,
        next_plan_version: 1,
        next_sequence: 1,
        plan_versions: BTreeSet::new(),
        steps: StepIndex::default(),
        step_ids: HashSet::new(),
        metadata,
        max_output_bytes: config.max_output_bytes,
        lock,
    })
}

/// Reopens an unfinalized record (for example after the writer crashed),
/// continuing from its last complete line. Finalized records are refused.
pub fn resume_investigation(config: &StoreConfig, id: &str) -> Result<CaptureSession, StoreError> {
    let dir = config.existing_record_dir(id)?;
    let lock = acquire_lock(config, &dir, id)?;
    let metadata = read_metadata(&dir)?;
    if metadata.completed_at.is_some() {
        return Err(StoreError::SessionFinalized);
    }
    let record = parse_record(&dir)?;
    reject(validate_record(&record))?;
    let state = if record.verdict.is_some() {
        SessionState::VerdictRecorded
    } else {
        SessionState::Open
    };
    Ok(CaptureSession {
        id: record.envelope.investigation_id.clone(),
        next_plan_version: record.plans.len() as u32 + 1,
        next_sequence: record.steps.last().map_or(1, |s| s.sequence + 1),
        plan_versions: record.plans.iter().map(|p| p.plan_version).collect(),
        steps: StepIndex::from_steps(&record.steps),
        step_ids: record.steps.iter().map(|s| s.step_id.clone()).collect(),
        dir,
        state,
        metadata,
        max_output_bytes: config.max_output_bytes,
        lock,
    })
}

/// Appends one canonical line and syncs it to disk.
fn append_line<T: Serialize>(path: &Path, value: &T) -> Result<(), StoreError> {
    let line = crate::record::canonical_line(value)?;
    let mut file = OpenOptions::new().create(true).append(true).open(path)?;
    file.write_all(line.as_bytes())?;
    file.sync_data()?;
    Ok(())
}

/// Replaces outputs larger than `limit` bytes with a truncation marker.
fn truncate_outputs(step: &mut Step, limit: usize) {
    for call in &mut step.tool_calls {
        let bytes = match &call.output {
            Value::String(s) => s.len(),
            other => canonical_text(other).len(),
        };
        if bytes > limit {
            call.output = json!({"truncated": true, "bytes": bytes});
        }
    }
}

const RESERVED_METADATA: &[&str] = &[
    "schema_version",
    "created_at",
    "completed_at",
    "duration_ms",
    "pinned",
    "promoted",
];

impl CaptureSession {
    pub fn investigation_id(&self) -> &InvestigationId {
        &self.id
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn state(&self) -> SessionState {
        self.state
    }

    pub fn next_plan_version(&self) -> u32 {
        self.next_plan_version
    }

    pub fn next_sequence(&self) -> u32 {
        self.next_sequence
    }

    pub fn metadata(&self) -> &Metadata {
        &self.metadata
    }

    fn require_open(&self, op: &'static str) -> Result<(), StoreError> {
        match self.state {
            SessionState::Open => Ok(()),
            SessionState::Finalized => Err(StoreError::SessionFinalized),
            state => Err(StoreError::SessionState { op, state }),
        }
    }

    pub fn log_plan(&mut self, plan: Plan) -> Result<u32, StoreError> {
        self.require_open("log_plan")?;
        let line = self.next_plan_version as usize;
        reject(check_plan(&plan, line, self.next_plan_version, &self.steps))?;
        append_line(&self.dir.join(PLANS_FILE), &plan)?;
        self.plan_versions.insert(plan.plan_version);
        self.next_plan_version += 1;
        Ok(plan.plan_version)
    }

    pub fn log_step(&mut self, mut step: Step) -> Result<String, StoreError> {
        self.require_open("log_step")?;
        let line = self.step_ids.len() + 1;
        reject(check_step(
            &step,
            line,
            self.next_sequence,
            &self.plan_versions,
            &self.step_ids,
        ))?;
        if let Some(limit) = self.max_output_bytes {
            truncate_outputs(&mut step, limit);
        }
        append_line(&self.dir.join(STEPS_FILE), &step)?;
        self.steps.insert(&step);
        self.step_ids.insert(step.step_id.clone());
        self.next_sequence = step.sequence + 1;
        Ok(step.step_id)
    }

    pub fn record_verdict(&mut self, verdict: Verdict) -> Result<(), StoreError> {
        self.require_open("record_verdict")?;
        reject(check_verdict(&verdict, &self.steps))?;
        write_json_file(&self.dir.join(VERDICT_FILE), &verdict)?;
        self.state = SessionState::VerdictRecorded;
        Ok(())
    }

    /// Sets an agent-writable metadata field (`cost_usd` or an extension
    /// field). Store-managed fields and `fidelity` are refused.
    pub fn set_metadata_field(&mut self, key: &str, value: Value) -> Result<(), StoreError> {
        if self.state == SessionState::Finalized {
            return Err(StoreError::SessionFinalized);
        }
        if key == "fidelity" {
            return Err(StoreError::FidelityWriteForbidden);
        }
        if RESERVED_METADATA.contains(&key) {
            return Err(StoreError::MetadataFieldReserved(key.to_string()));
        }
        let mut updated = self.metadata.clone();
        if key == "cost_usd" {
            let cost = value.as_f64().ok_or_else(|| {
                StoreError::Invalid(vec![Violation::new(
                    Code::CostNegative,
                    METADATA_FILE,
                    0,
                    "$.cost_usd",
                    "must be a non-negative number",
                )])
            })?;
            updated.cost_usd = Some(cost);
        } else {
            updated.extra.insert(key.to_string(), value);
        }
        reject(check_metadata(&updated))?;
        write_json_file(&self.dir.join(METADATA_FILE), &updated)?;
        self.metadata = updated;
        Ok(())
    }

    /// Stamps completion time and duration and releases the lock.
    pub fn finalize(&mut self) -> Result<Metadata, StoreError> {
        if self.state == SessionState::Finalized {
            return Err(StoreError::SessionFinalized);
        }
        let completed = Timestamp::now().max(self.metadata.created_at);
        self.metadata.completed_at = Some(completed);
        self.metadata.duration_ms = Some((completed.millis() - self.metadata.created_at.millis()) as u64);
        write_json_file(&self.dir.join(METADATA_FILE), &self.metadata)?;
        self.lock.release()?;
        self.state = SessionState::Finalized;
        Ok(self.metadata.clone())
    }
}
