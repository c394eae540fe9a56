//! Replay of recorded investigations: a deterministic narrated walkthrough,
//! mock replay of the reasoning under a new model or prompt identity over
//! the recorded tool outputs, and live re-execution through a pluggable
//! executor.

mod backend;
mod compare;
mod narrate;
mod text;

use std::collections::HashMap;
use std::fs;
use std::io;
use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

pub use backend::{EchoBackend, HttpBackend, ScriptedBackend};
pub use compare::{jaccard, tokens, Comparator, ComparatorConfig, JaccardComparator};
pub use narrate::narrate;
pub use text::render_report;

use crate::record::canonical::canonical_text;
use crate::record::{
    parse_record, validate_record, write_json_file, AgentIdentity, Envelope, ExecutionRecord,
    Plan, RejectedAlternative, TokenUsage, ToolCall, Violation,
};
use crate::store::StoreConfig;

/// What the reasoner sees for one step (or, with no step, for the verdict).
#[derive(Debug, Clone, Serialize)]
pub struct ReplayContext<'a> {
    pub envelope: &'a Envelope,
    pub plans_so_far: &'a [Plan],
    pub prior_annotations: &'a [StepAnnotation],
    #[serde(skip_serializing_if = "Option::is_none")]
    pub step_id: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub intent: Option<&'a str>,
    /// Recorded calls with their outputs, verbatim.
    pub current_step_tool_calls: &'a [ToolCall],
    pub new_identity: &'a AgentIdentity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepAnnotation {
    pub observation: String,
    pub inference: String,
    #[serde(default)]
    pub wants_replan: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokens: Option<TokenUsage>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerdictDraft {
    pub root_cause_category: String,
    pub confidence: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evidence_chain: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alternatives_rejected: Option<Vec<RejectedAlternative>>,
}

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("no scripted annotation for {0}")]
    NotScripted(String),
    #[error("malformed backend response: {0}")]
    Malformed(String),
    #[error("backend request failed: {0}")]
    Transport(String),
}

/// A reasoner under test.
pub trait ReasonerBackend: Send + Sync {
    fn annotate_step(&self, ctx: &ReplayContext<'_>) -> Result<StepAnnotation, BackendError>;
    fn judge_final(&self, ctx: &ReplayContext<'_>) -> Result<VerdictDraft, BackendError>;
    /// Whether batch replay may call this backend from several threads.
    fn concurrent_safe(&self) -> bool {
        true
    }
}

#[derive(Debug, Error)]
pub enum ExecutorError {
    #[error("no executor configured")]
    Unavailable,
    #[error("tool execution failed: {0}")]
    Failed(String),
}

/// Issues real tool calls for live replay.
pub trait ToolExecutor: Sync {
    fn execute(&self, call: &ToolCall) -> Result<Value, ExecutorError>;
}

/// Refuses every call; the default for live replay.
#[derive(Debug, Default, Clone, Copy)]
pub struct UnavailableExecutor;

impl ToolExecutor for UnavailableExecutor {
    fn execute(&self, _call: &ToolCall) -> Result<Value, ExecutorError> {
        Err(ExecutorError::Unavailable)
    }
}

/// Answers each call with the output recorded for the same tool and
/// input; a live replay through it reproduces the record exactly.
#[derive(Debug, Clone, Default)]
pub struct RecordedExecutor {
    outputs: HashMap<(String, String), Value>,
}

impl RecordedExecutor {
    pub fn from_record(record: &ExecutionRecord) -> Self {
        let mut outputs = HashMap::new();
        for call in record.steps.iter().flat_map(|s| &s.tool_calls) {
            outputs
                .entry((call.tool.clone(), canonical_text(&call.input)))
                .or_insert_with(|| call.output.clone());
        }
        RecordedExecutor { outputs }
    }
}

impl ToolExecutor for RecordedExecutor {
    fn execute(&self, call: &ToolCall) -> Result<Value, ExecutorError> {
        self.outputs
            .get(&(call.tool.clone(), canonical_text(&call.input)))
            .cloned()
            .ok_or_else(|| ExecutorError::Failed(format!("no recorded output for {}", call.tool)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplayMode {
    Narrate,
    Mock,
    Live,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepOutcome {
    Equivalent,
    Divergent,
    ExecutorUnavailable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerdictOutcome {
    Converged,
    Diverged,
    /// The record has no verdict.
    Absent,
    /// The mode does not judge verdicts (live replay).
    NotCompared,
}

/// Fresh versus recorded output of one call in live replay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CallDiff {
    pub index: usize,
    pub tool: String,
    pub identical: bool,
    pub recorded_bytes: usize,
    pub fresh_bytes: usize,
    /// Byte offset of the first difference in canonical form.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub first_difference: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepComparison {
    pub step_id: String,
    pub outcome: StepOutcome,
    pub note: String,
    /// Original inference.
    pub original_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub new_text: Option<String>,
    pub original_triggered_replan: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub new_wants_replan: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokens: Option<TokenUsage>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub call_diffs: Vec<CallDiff>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerdictComparison {
    pub original_category: String,
    pub original_confidence: f64,
    pub original_alternatives: usize,
    pub original_evidence_chain: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub new_category: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub new_confidence: Option<f64>,
    /// Present only when the backend supplied alternatives.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub new_alternatives: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub new_evidence_chain: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplaySummary {
    pub matched: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayReport {
    pub investigation_id: String,
    pub mode: ReplayMode,
    pub original_identity: AgentIdentity,
    pub new_identity: AgentIdentity,
    pub step_comparisons: Vec<StepComparison>,
    pub verdict_outcome: VerdictOutcome,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verdict: Option<VerdictComparison>,
    pub summary: ReplaySummary,
}

impl ReplayReport {
    fn summarize(&mut self) {
        self.summary = ReplaySummary {
            matched: self
                .step_comparisons
                .iter()
                .filter(|c| c.outcome == StepOutcome::Equivalent)
                .count(),
            total: self.step_comparisons.len(),
        };
    }
}

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error("record is invalid ({} violation(s))", .0.len())]
    Invalid(Vec<Violation>),
    #[error(transparent)]
    Parse(#[from] crate::record::ParseError),
    #[error(transparent)]
    Store(#[from] crate::store::StoreError),
    #[error("{0}")]
    Io(#[from] io::Error),
}

/// The identity under test: the original with model and prompt overrides.
pub fn new_identity(original: &AgentIdentity, model: Option<&str>, prompt_version: Option<&str>) -> AgentIdentity {
    AgentIdentity {
        agent_version: original.agent_version.clone(),
        model: model.unwrap_or(&original.model).to_string(),
        prompt_version: prompt_version.unwrap_or(&original.prompt_version).to_string(),
    }
}

fn plans_up_to(record: &ExecutionRecord, version: u32) -> &[Plan] {
    let n = record.plans.iter().take_while(|p| p.plan_version <= version).count();
    &record.plans[..n]
}

/// Drives mock and live replays. The executor is consulted only by
/// [`Replayer::live`]; mock replay never touches it.
pub struct Replayer<'a> {
    pub backend: &'a dyn ReasonerBackend,
    pub comparator: &'a dyn Comparator,
    pub executor: &'a dyn ToolExecutor,
    pub model: Option<String>,
    pub prompt_version: Option<String>,
}

impl<'a> Replayer<'a> {
    pub fn new(backend: &'a dyn ReasonerBackend, comparator: &'a dyn Comparator) -> Self {
        Replayer {
            backend,
            comparator,
            executor: &UnavailableExecutor,
            model: None,
            prompt_version: None,
        }
    }

    fn identities(&self, record: &ExecutionRecord) -> (AgentIdentity, AgentIdentity) {
        let original = record.envelope.agent.clone();
        let new = new_identity(&original, self.model.as_deref(), self.prompt_version.as_deref());
        (original, new)
    }

    /// Re-runs the reasoning step by step over the recorded tool outputs
    /// and compares each annotation, then the verdict, with the original.
    pub fn mock(&self, record: &ExecutionRecord) -> Result<ReplayReport, ReplayError> {
        let violations = validate_record(record);
        if !violations.is_empty() {
            return Err(ReplayError::Invalid(violations));
        }
        let (original_identity, new_identity) = self.identities(record);
        let mut annotations: Vec<StepAnnotation> = Vec::new();
        let mut comparisons = Vec::new();
        for step in &record.steps {
            let ctx = ReplayContext {
                envelope: &record.envelope,
                plans_so_far: plans_up_to(record, step.plan_version),
                prior_annotations: &annotations,
                step_id: Some(&step.step_id),
                intent: Some(&step.intent),
                current_step_tool_calls: &step.tool_calls,
                new_identity: &new_identity,
            };
            let triggered = record.triggered_replan(&step.step_id);
            match self.backend.annotate_step(&ctx) {
                Ok(annotation) => {
                    comparisons.push(self.comparator.compare_step(step, triggered, &annotation));
                    annotations.push(annotation);
                }
                Err(e) => comparisons.push(StepComparison {
                    step_id: step.step_id.clone(),
                    outcome: StepOutcome::Divergent,
                    note: format!("backend_error: {e}"),
                    original_text: step.inference.clone(),
                    new_text: None,
                    original_triggered_replan: triggered,
                    new_wants_replan: None,
                    tokens: None,
                    call_diffs: Vec::new(),
                }),
            }
        }

        let (verdict_outcome, verdict) = match &record.verdict {
            None => (VerdictOutcome::Absent, None),
            Some(original) => {
                let ctx = ReplayContext {
                    envelope: &record.envelope,
                    plans_so_far: &record.plans,
                    prior_annotations: &annotations,
                    step_id: None,
                    intent: None,
                    current_step_tool_calls: &[],
                    new_identity: &new_identity,
                };
                let mut cmp = VerdictComparison {
                    original_category: original.root_cause_category.clone(),
                    original_confidence: original.confidence,
                    original_alternatives: original.alternatives_rejected.len(),
                    original_evidence_chain: original.evidence_chain.clone(),
                    new_category: None,
                    new_confidence: None,
                    new_alternatives: None,
                    new_evidence_chain: None,
                    error: None,
                };
                let outcome = match self.backend.judge_final(&ctx) {
                    Ok(draft) if !(0.0..=1.0).contains(&draft.confidence) => {
                        cmp.error = Some(format!("backend_error: confidence {} out of range", draft.confidence));
                        VerdictOutcome::Diverged
                    }
                    Ok(draft) => {
                        let outcome = self.comparator.compare_verdict(original, &draft);
                        cmp.new_category = Some(draft.root_cause_category);
                        cmp.new_confidence = Some(draft.confidence);
                        cmp.new_alternatives = draft.alternatives_rejected.map(|a| a.len());
                        cmp.new_evidence_chain = draft.evidence_chain;
                        outcome
                    }
                    Err(e) => {
                        cmp.error = Some(format!("backend_error: {e}"));
                        VerdictOutcome::Diverged
                    }
                };
                (outcome, Some(cmp))
            }
        };

        let mut report = ReplayReport {
            investigation_id: record.id().to_string(),
            mode: ReplayMode::Mock,
            original_identity,
            new_identity,
            step_comparisons: comparisons,
            verdict_outcome,
            verdict,
            summary: ReplaySummary { matched: 0, total: 0 },
        };
        report.summarize();
        Ok(report)
    }

    /// Re-issues every recorded call through the executor and diffs fresh
    /// outputs against recorded ones. No reasoner is involved.
    pub fn live(&self, record: &ExecutionRecord) -> Result<ReplayReport, ReplayError> {
        let violations = validate_record(record);
        if !violations.is_empty() {
            return Err(ReplayError::Invalid(violations));
        }
        let (original_identity, new_identity) = self.identities(record);
        let mut comparisons = Vec::new();
        for step in &record.steps {
            let mut diffs = Vec::new();
            let mut unavailable = false;
            let mut failures = Vec::new();
            for (index, call) in step.tool_calls.iter().enumerate() {
                match self.executor.execute(call) {
                    Ok(fresh) => diffs.push(diff_outputs(index, call, &fresh)),
                    Err(ExecutorError::Unavailable) => {
                        unavailable = true;
                        break;
                    }
                    Err(e) => failures.push(format!("call {index} ({}): {e}", call.tool)),
                }
            }
            let changed: Vec<String> = diffs
                .iter()
                .filter(|d| !d.identical)
                .map(|d| format!("output of call {} ({}) differs", d.index, d.tool))
                .collect();
            let (outcome, note) = if unavailable {
                (StepOutcome::ExecutorUnavailable, "executor_unavailable".to_string())
            } else if changed.is_empty() && failures.is_empty() {
                (StepOutcome::Equivalent, "outputs identical".to_string())
            } else {
                (StepOutcome::Divergent, [changed, failures].concat().join("; "))
            };
            comparisons.push(StepComparison {
                step_id: step.step_id.clone(),
                outcome,
                note,
                original_text: step.inference.clone(),
                new_text: None,
                original_triggered_replan: record.triggered_replan(&step.step_id),
                new_wants_replan: None,
                tokens: None,
                call_diffs: if unavailable { Vec::new() } else { diffs },
            });
        }
        let mut report = ReplayReport {
            investigation_id: record.id().to_string(),
            mode: ReplayMode::Live,
            original_identity,
            new_identity,
            step_comparisons: comparisons,
            verdict_outcome: VerdictOutcome::NotCompared,
            verdict: None,
            summary: ReplaySummary { matched: 0, total: 0 },
        };
        report.summarize();
        Ok(report)
    }
}

fn diff_outputs(index: usize, call: &ToolCall, fresh: &Value) -> CallDiff {
    let a = canonical_text(&call.output);
    let b = canonical_text(fresh);
    let first_difference = if a == b {
        None
    } else {
        Some(
            a.bytes()
                .zip(b.bytes())
                .position(|(x, y)| x != y)
                .unwrap_or(a.len().min(b.len())),
        )
    };
    CallDiff {
        index,
        tool: call.tool.clone(),
        identical: a == b,
        recorded_bytes: a.len(),
        fresh_bytes: b.len(),
        first_difference,
    }
}

/// One batch member's result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[allow(clippy::large_enum_variant)]
pub enum BatchEntry {
    Report(ReplayReport),
    Error { investigation_id: String, message: String },
}

impl BatchEntry {
    pub fn report(&self) -> Option<&ReplayReport> {
        match self {
            BatchEntry::Report(r) => Some(r),
            BatchEntry::Error { .. } => None,
        }
    }
}

/// Mock-replays every id; failures are reported per record and never stop
/// the batch. Records run in parallel when the backend allows it. Output
/// order follows `ids`.
pub fn batch_mock_replay(config: &StoreConfig, ids: &[String], replayer: &Replayer<'_>) -> Vec<BatchEntry> {
    let run = |id: &String| -> BatchEntry {
        let outcome = config
            .existing_record_dir(id)
            .map_err(ReplayError::from)
            .and_then(|dir| Ok(parse_record(&dir)?))
            .and_then(|record| replayer.mock(&record));
        match outcome {
            Ok(report) => BatchEntry::Report(report),
            Err(e) => BatchEntry::Error {
                investigation_id: id.clone(),
                message: e.to_string(),
            },
        }
    };
    if replayer.backend.concurrent_safe() {
        ids.par_iter().map(run).collect()
    } else {
        ids.iter().map(run).collect()
    }
}

/// Writes a report under `replays/<id>/`, never into the record itself.
pub fn save_report(config: &StoreConfig, report: &ReplayReport) -> io::Result<PathBuf> {
    let dir = config.replays_dir(&report.investigation_id);
    fs::create_dir_all(&dir)?;
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%S%.3fZ");
    let mode = match report.mode {
        ReplayMode::Narrate => "narrate",
        ReplayMode::Mock => "mock",
        ReplayMode::Live => "live",
    };
    let path = dir.join(format!("{mode}-{stamp}.json"));
    write_json_file(&path, report)?;
    Ok(path)
}
