//! Post-session reconciliation of self-reported tool calls against the
//! interceptor logs, producing a per-investigation fidelity report.
//!
//! The report lands in `metadata.json` through [`write_fidelity`], which is
//! the only code path allowed to set `metadata.fidelity`; the capture API
//! refuses it.

mod align;

use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

pub use align::{align, edit_distance, AlignOptions, Alignment, NoiseFilter};

use crate::intercept::{load_intercept_logs, Direction, InterceptLog, Peer};
use crate::record::canonical::canonical_text;
use crate::record::{
    parse_record, validate_record, write_json_file, ExecutionRecord, ParseError, Timestamp,
    Violation, METADATA_FILE,
};

/// One tool call as the agent reported it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClaimedCall {
    pub step_id: String,
    pub index_in_step: usize,
    /// Lowercased, trimmed tool name.
    pub tool: String,
    pub input_canonical: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ts_hint: Option<Timestamp>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layer {
    Rpc,
    Shell,
}

/// One call observed by an interceptor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundCall {
    pub layer: Layer,
    pub ts: Timestamp,
    /// Tool name (MCP `tools/call` target, other RPC method, or shell binary), lowercased.
    pub name: String,
    pub input_canonical: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub server: Option<String>,
    /// Raw JSON-RPC method for RPC calls.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub method: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchQuality {
    Exact,
    InputDivergent,
    NameDivergent,
}

impl MatchQuality {
    /// Credit a pair earns toward the fidelity score.
    pub fn weight(self) -> f64 {
        match self {
            MatchQuality::Exact => 1.0,
            MatchQuality::InputDivergent => 0.5,
            MatchQuality::NameDivergent => 0.25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchPair {
    pub claimed: ClaimedCall,
    pub ground: GroundCall,
    pub quality: MatchQuality,
}

/// A file-system event placed in the step whose time span contains it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FsAttribution {
    pub ts: Timestamp,
    pub kind: crate::intercept::FsKind,
    pub path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityReport {
    pub score: f64,
    pub mcp_coverage: f64,
    pub shell_coverage: f64,
    pub tool_match_rate: f64,
    pub fabrication_rate: f64,
    pub hidden_call_rate: f64,
    pub claims_total: usize,
    pub ground_total: usize,
    pub pairs: Vec<MatchPair>,
    pub fabricated: Vec<ClaimedCall>,
    pub hidden: Vec<GroundCall>,
    #[serde(default)]
    pub noise_filtered: usize,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub ground_truth_absent: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub fs_context: Vec<FsAttribution>,
}

impl FidelityReport {
    /// The scalar and every component rate, by field name.
    pub fn rates(&self) -> [(&'static str, f64); 6] {
        [
            ("score", self.score),
            ("mcp_coverage", self.mcp_coverage),
            ("shell_coverage", self.shell_coverage),
            ("tool_match_rate", self.tool_match_rate),
            ("fabrication_rate", self.fabrication_rate),
            ("hidden_call_rate", self.hidden_call_rate),
        ]
    }

    pub fn count(&self, quality: MatchQuality) -> usize {
        self.pairs.iter().filter(|p| p.quality == quality).count()
    }
}

pub fn normalize_tool_name(name: &str) -> String {
    name.trim().to_lowercase()
}

/// Canonical input as used for matching. Arrays of strings are treated as
/// argv tails and joined with single spaces, so a claimed `"-r foo ."` and
/// an intercepted `["-r","foo","."]` compare equal.
pub fn input_for_matching(input: &Value) -> String {
    if let Value::Array(items) = input {
        if !items.is_empty() && items.iter().all(Value::is_string) {
            let joined = items
                .iter()
                .filter_map(Value::as_str)
                .collect::<Vec<_>>()
                .join(" ");
            return canonical_text(&Value::String(joined));
        }
    }
    canonical_text(input)
}

/// One claim per recorded tool call, in step order.
pub fn extract_claims(record: &ExecutionRecord) -> Vec<ClaimedCall> {
    record
        .steps
        .iter()
        .flat_map(|step| {
            step.tool_calls.iter().enumerate().map(|(i, call)| ClaimedCall {
                step_id: step.step_id.clone(),
                index_in_step: i,
                tool: normalize_tool_name(&call.tool),
                input_canonical: input_for_matching(&call.input),
                ts_hint: None,
            })
        })
        .collect()
}

/// Alignable calls from the interceptor logs: client-originated JSON-RPC
/// requests and shell commands, merged by timestamp (RPC first on ties).
/// An MCP `tools/call` request is named by its `params.name` with
/// `params.arguments` as input; other methods use the method and `params`.
pub fn ground_calls(log: &InterceptLog) -> Vec<GroundCall> {
    let mut out: Vec<GroundCall> = Vec::new();
    for entry in &log.rpc {
        if entry.direction != Direction::Request || entry.from != Peer::Client {
            continue;
        }
        let Some(method) = entry.method.clone() else {
            continue;
        };
        let params: Value = entry
            .params_canonical
            .as_deref()
            .and_then(|p| serde_json::from_str(p).ok())
            .unwrap_or(Value::Null);
        let tool = (method == "tools/call")
            .then(|| params.get("name").and_then(Value::as_str))
            .flatten();
        let (name, input) = match tool {
            Some(tool) => (
                tool.to_string(),
                params.get("arguments").cloned().unwrap_or(Value::Object(Default::default())),
            ),
            None => (method.clone(), params),
        };
        out.push(GroundCall {
            layer: Layer::Rpc,
            ts: entry.ts,
            name: normalize_tool_name(&name),
            input_canonical: input_for_matching(&input),
            server: Some(entry.server.clone()),
            method: Some(method),
        });
    }
    for entry in &log.shell {
        if entry.argv.is_empty() {
            continue;
        }
        let tail = entry.argv[1..].join(" ");
        out.push(GroundCall {
            layer: Layer::Shell,
            ts: entry.ts,
            name: normalize_tool_name(entry.binary()),
            input_canonical: canonical_text(&Value::String(tail)),
            server: None,
            method: None,
        });
    }
    // stable: rpc entries precede shell entries with the same timestamp
    out.sort_by_key(|g| g.ts);
    out
}

/// Scores an alignment. `score = 2W / (|claims| + |ground|)` where W sums
/// pair weights (exact 1, input-divergent 0.5, name-divergent 0.25) and
/// `ground` excludes noise-filtered calls; an empty session scores 1.
/// Per-layer coverage is the matched fraction of that layer's ground calls,
/// 1 when the layer saw no calls.
pub fn score_fidelity(alignment: &Alignment, claims: &[ClaimedCall], ground: &[GroundCall]) -> FidelityReport {
    let n_claims = claims.len();
    let n_ground = ground.len() - alignment.filtered.len();
    let weight: f64 = alignment.pairs.iter().map(|p| p.quality.weight()).sum();
    let score = if n_claims + n_ground == 0 {
        1.0
    } else {
        2.0 * weight / (n_claims + n_ground) as f64
    };
    let coverage = |layer: Layer| {
        let matched = alignment.pairs.iter().filter(|p| p.ground.layer == layer).count();
        let total = matched + alignment.hidden.iter().filter(|g| g.layer == layer).count();
        if total == 0 {
            1.0
        } else {
            matched as f64 / total as f64
        }
    };
    let exact = alignment
        .pairs
        .iter()
        .filter(|p| p.quality == MatchQuality::Exact)
        .count();
    FidelityReport {
        score,
        mcp_coverage: coverage(Layer::Rpc),
        shell_coverage: coverage(Layer::Shell),
        tool_match_rate: exact as f64 / alignment.pairs.len().max(1) as f64,
        fabrication_rate: alignment.fabricated.len() as f64 / n_claims.max(1) as f64,
        hidden_call_rate: alignment.hidden.len() as f64 / n_ground.max(1) as f64,
        claims_total: n_claims,
        ground_total: n_ground,
        pairs: alignment.pairs.clone(),
        fabricated: alignment.fabricated.clone(),
        hidden: alignment.hidden.clone(),
        noise_filtered: alignment.filtered.len(),
        ground_truth_absent: false,
        fs_context: Vec::new(),
    }
}

/// Places each file-system event in the step whose span contains it. A step
/// span starts at the earliest ground call paired with one of its claims and
/// runs until the next step's start; events before the first span stay
/// unattributed.
pub fn attribute_fs_events(log: &InterceptLog, pairs: &[MatchPair], record: &ExecutionRecord) -> Vec<FsAttribution> {
    let mut starts: Vec<(Timestamp, String)> = record
        .steps
        .iter()
        .filter_map(|step| {
            pairs
                .iter()
                .filter(|p| p.claimed.step_id == step.step_id)
                .map(|p| p.ground.ts)
                .min()
                .map(|ts| (ts, step.step_id.clone()))
        })
        .collect();
    starts.sort();
    log.fs
        .iter()
        .map(|event| FsAttribution {
            ts: event.ts,
            kind: event.kind,
            path: event.path.clone(),
            step_id: starts
                .iter()
                .rev()
                .find(|(start, _)| *start <= event.ts)
                .map(|(_, id)| id.clone()),
        })
        .collect()
}

#[derive(Debug, Error)]
pub enum ReconcileError {
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error("record has {} violation(s); refusing to reconcile", .0.len())]
    Invalid(Vec<Violation>),
    #[error("{0}")]
    Io(#[from] io::Error),
}

/// Extract, align and score one record. When `dry_run` is false the report
/// is written into the record's `metadata.json`, replacing any earlier one.
pub fn reconcile(
    record_dir: &Path,
    intercept_dir: &Path,
    opts: &AlignOptions,
    dry_run: bool,
) -> Result<FidelityReport, ReconcileError> {
    let record = parse_record(record_dir)?;
    let violations = validate_record(&record);
    if !violations.is_empty() {
        return Err(ReconcileError::Invalid(violations));
    }
    let log = load_intercept_logs(intercept_dir)?;
    let report = reconcile_record(&record, &log, opts);
    if !dry_run {
        write_fidelity(record_dir, &report)?;
    }
    Ok(report)
}

/// The in-memory pipeline behind [`reconcile`].
pub fn reconcile_record(record: &ExecutionRecord, log: &InterceptLog, opts: &AlignOptions) -> FidelityReport {
    let claims = extract_claims(record);
    let ground = ground_calls(log);
    let alignment = align(&claims, &ground, opts);
    let mut report = score_fidelity(&alignment, &claims, &ground);
    report.ground_truth_absent = log.files_found == 0;
    report.fs_context = attribute_fs_events(log, &report.pairs, record);
    report
}

/// Verifier-side metadata writer. The capture path has no equivalent.
pub fn write_fidelity(record_dir: &Path, report: &FidelityReport) -> io::Result<()> {
    let path = record_dir.join(METADATA_FILE);
    let text = std::fs::read_to_string(&path)?;
    let mut metadata: crate::record::Metadata =
        serde_json::from_str(&text).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
    metadata.fidelity = Some(report.clone());
    write_json_file(&path, &metadata)
}
