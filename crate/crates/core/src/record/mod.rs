//! Agent Execution Record domain types.
//!
//! A record is five files under `incidents/<investigation_id>/`: the
//! envelope (identity, trigger, authority, retrieved context), versioned
//! plans, steps carrying the intent/observation/inference triple next to the
//! mechanical tool calls, the verdict, and lifecycle metadata.

pub mod canonical;
mod io;
pub mod validate;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::Value;

pub use io::{
    parse_record, read_jsonl, record_to_json, write_json_file, write_record, ParseError,
    ENVELOPE_FILE, METADATA_FILE, PLANS_FILE, STEPS_FILE, VERDICT_FILE,
};
pub(crate) use io::{canonical_line, jsonl};
pub use validate::{validate_record, Violation};

use crate::reconcile::FidelityReport;

/// Schema version written by this toolkit.
pub const SCHEMA_VERSION: &str = "1.0.0";
/// Accepted schema version prefixes (additive evolution within a major).
pub const KNOWN_SCHEMA_PREFIXES: &[&str] = &["1."];

/// UTC wall-clock instant, serialized as RFC 3339 with millisecond precision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Timestamp(pub DateTime<Utc>);

impl Timestamp {
    pub fn now() -> Self {
        Timestamp(Utc::now()).truncated()
    }

    pub fn from_millis(ms: i64) -> Self {
        Timestamp(DateTime::from_timestamp_millis(ms).expect("timestamp in range"))
    }

    pub fn millis(&self) -> i64 {
        self.0.timestamp_millis()
    }

    /// Drops sub-millisecond precision so the value survives a round trip.
    pub fn truncated(self) -> Self {
        Self::from_millis(self.millis())
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0.to_rfc3339_opts(SecondsFormat::Millis, true))
    }
}

impl FromStr for Timestamp {
    type Err = chrono::ParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(Timestamp(DateTime::parse_from_rfc3339(s)?.with_timezone(&Utc)))
    }
}

impl Serialize for Timestamp {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Timestamp {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Investigation identifier; doubles as the record's directory name.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct InvestigationId(String);

impl InvestigationId {
    /// Builds an id, rejecting anything that is not `[A-Za-z0-9._-]+` or
    /// that would be a relative path component.
    pub fn new(value: impl Into<String>) -> Result<Self, String> {
        let value = value.into();
        if Self::is_valid(&value) {
            Ok(InvestigationId(value))
        } else {
            Err(value)
        }
    }

    /// Wraps without checking; the validator reports bad ids later.
    pub fn new_unchecked(value: impl Into<String>) -> Self {
        InvestigationId(value.into())
    }

    pub fn is_valid(value: &str) -> bool {
        !value.is_empty()
            && value != "."
            && value != ".."
            && value
                .bytes()
                .all(|b| b.is_ascii_alphanumeric() || matches!(b, b'.' | b'_' | b'-'))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for InvestigationId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub investigation_id: InvestigationId,
    pub trigger: Trigger,
    pub agent: AgentIdentity,
    pub authority: Authority,
    pub context_snapshot: ContextSnapshot,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain_profile: Option<ProfileTag>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trigger {
    pub source: String,
    pub reference: String,
    pub summary: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub severity: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentIdentity {
    pub agent_version: String,
    pub model: String,
    pub prompt_version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Authority {
    pub delegated_by: String,
    pub delegation_mechanism: String,
    pub permissions_scope: Vec<String>,
    /// Ordered from the originating principal to the acting agent.
    pub authority_chain: Vec<Principal>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Principal {
    pub principal: String,
    #[serde(rename = "type")]
    pub kind: PrincipalKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrincipalKind {
    System,
    Team,
    Human,
    Agent,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ContextSnapshot {
    pub retrieval_context: RetrievalContext,
    #[serde(default)]
    pub system_context: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RetrievalContext {
    #[serde(default)]
    pub sources: Vec<RetrievalSource>,
}

/// What actually entered the context window, not what was available.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalSource {
    #[serde(rename = "type")]
    pub kind: String,
    pub query: String,
    pub chunks_retrieved: u64,
    pub chunk_ids: Vec<String>,
    pub total_tokens: u64,
}

/// Domain profile tag. Extension keys are namespaced `<profile_id>.<field>`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileTag {
    pub profile_id: String,
    pub profile_version: String,
    #[serde(default)]
    pub extensions: BTreeMap<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plan {
    pub plan_version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub supersedes: Option<u32>,
    /// Step whose observation caused this re-plan.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub revision_trigger: Option<String>,
    pub rationale: String,
    pub steps_intended: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub step_id: String,
    pub plan_version: u32,
    pub sequence: u32,
    pub intent: String,
    pub tool_calls: Vec<ToolCall>,
    pub observation: String,
    pub inference: String,
    pub tokens: TokenUsage,
}

/// Canonical `step_NNN` identifier for a sequence number.
pub fn step_id_for(sequence: u32) -> String {
    format!("step_{sequence:03}")
}

/// Sequence number encoded in a well-formed step id.
pub fn parse_step_id(id: &str) -> Option<u32> {
    let digits = id.strip_prefix("step_")?;
    if digits.len() < 3 || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    digits.parse().ok()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolCall {
    pub tool: String,
    /// Plain string or structured JSON, stored as given.
    pub input: Value,
    pub output: Value,
    pub duration_ms: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TokenUsage {
    pub input: u64,
    pub output: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    /// Free-form `" > "`-separated path, e.g. `Infrastructure > Memory > OOM Kill`.
    pub root_cause_category: String,
    pub root_cause_summary: String,
    pub confidence: f64,
    pub affected_components: Vec<String>,
    /// Supporting steps, a subset of the execution in sequence order.
    pub evidence_chain: Vec<String>,
    pub alternatives_rejected: Vec<RejectedAlternative>,
    pub remediation: Vec<String>,
}

impl Verdict {
    pub fn category_levels(&self) -> Vec<&str> {
        category_levels(&self.root_cause_category)
    }
}

pub fn category_levels(category: &str) -> Vec<&str> {
    category
        .split(" > ")
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RejectedAlternative {
    pub hypothesis: String,
    pub rejected_by: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub schema_version: String,
    pub created_at: Timestamp,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub completed_at: Option<Timestamp>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duration_ms: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cost_usd: Option<f64>,
    #[serde(default)]
    pub pinned: bool,
    #[serde(default)]
    pub promoted: bool,
    /// Only ever written by the reconciler.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fidelity: Option<FidelityReport>,
    /// Fields added by newer minor schema versions are carried through.
    #[serde(flatten)]
    pub extra: BTreeMap<String, Value>,
}

impl Metadata {
    pub fn new(created_at: Timestamp) -> Self {
        Metadata {
            schema_version: SCHEMA_VERSION.to_string(),
            created_at,
            completed_at: None,
            duration_ms: None,
            cost_usd: None,
            pinned: false,
            promoted: false,
            fidelity: None,
            extra: BTreeMap::new(),
        }
    }
}

/// One investigation. Members other than the envelope may be missing for
/// records left behind by crashed sessions.
#[derive(Debug, Clone, PartialEq)]
pub struct ExecutionRecord {
    pub envelope: Envelope,
    pub plans: Vec<Plan>,
    pub steps: Vec<Step>,
    pub verdict: Option<Verdict>,
    pub metadata: Option<Metadata>,
    /// Directory name the record was loaded from, when loaded from disk.
    pub dir_name: Option<String>,
}

impl ExecutionRecord {
    pub fn id(&self) -> &InvestigationId {
        &self.envelope.investigation_id
    }

    pub fn step(&self, step_id: &str) -> Option<&Step> {
        self.steps.iter().find(|s| s.step_id == step_id)
    }

    pub fn step_by_sequence(&self, sequence: u32) -> Option<&Step> {
        self.steps.iter().find(|s| s.sequence == sequence)
    }

    /// Step ids named as a revision trigger by any plan.
    pub fn revision_triggers(&self) -> impl Iterator<Item = &str> {
        self.plans.iter().filter_map(|p| p.revision_trigger.as_deref())
    }

    pub fn triggered_replan(&self, step_id: &str) -> bool {
        self.revision_triggers().any(|t| t == step_id)
    }
}
