//! Schema-level validation.
//!
//! The per-file checks are exposed individually so the capture session can
//! run exactly the same rules on each append before it reaches disk.

use std::collections::{BTreeSet, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use super::io::{ENVELOPE_FILE, METADATA_FILE, PLANS_FILE, STEPS_FILE, VERDICT_FILE};
use super::{
    parse_step_id, Envelope, ExecutionRecord, InvestigationId, Metadata, Plan, PrincipalKind,
    Step, Verdict, KNOWN_SCHEMA_PREFIXES,
};
use crate::codes::Code;

/// One broken invariant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub code: Code,
    pub file: String,
    pub locator: String,
    pub message: String,
    #[serde(skip)]
    line: usize,
}

impl Violation {
    pub fn new(code: Code, file: &str, line: usize, path: &str, message: impl Into<String>) -> Self {
        let locator = if line > 0 {
            format!("line {line}: {path}")
        } else {
            path.to_string()
        };
        Violation {
            code,
            file: file.to_string(),
            locator,
            message: message.into(),
            line,
        }
    }

    pub fn line(&self) -> usize {
        self.line
    }

    fn sort_key(&self) -> (usize, usize, &str) {
        let rank = [ENVELOPE_FILE, PLANS_FILE, STEPS_FILE, VERDICT_FILE, METADATA_FILE]
            .iter()
            .position(|f| *f == self.file)
            .unwrap_or(usize::MAX);
        (rank, self.line, &self.locator)
    }
}

/// Step facts the cross-file rules need.
#[derive(Debug, Default, Clone)]
pub struct StepIndex {
    by_id: HashMap<String, (u32, u32)>,
}

impl StepIndex {
    pub fn from_steps(steps: &[Step]) -> Self {
        let mut index = StepIndex::default();
        for step in steps {
            index.insert(step);
        }
        index
    }

    pub fn insert(&mut self, step: &Step) {
        self.by_id
            .entry(step.step_id.clone())
            .or_insert((step.sequence, step.plan_version));
    }

    pub fn contains(&self, step_id: &str) -> bool {
        self.by_id.contains_key(step_id)
    }

    /// (sequence, plan_version)
    pub fn get(&self, step_id: &str) -> Option<(u32, u32)> {
        self.by_id.get(step_id).copied()
    }

    fn steps_using_plan_at_or_above(&self, version: u32) -> impl Iterator<Item = u32> + '_ {
        self.by_id
            .values()
            .filter(move |(_, v)| *v >= version)
            .map(|(seq, _)| *seq)
    }
}

pub fn check_envelope(envelope: &Envelope, dir_name: Option<&str>) -> Vec<Violation> {
    let f = ENVELOPE_FILE;
    let mut out = Vec::new();
    let id = envelope.investigation_id.as_str();
    if !InvestigationId::is_valid(id) {
        out.push(Violation::new(
            Code::InvestigationIdInvalid,
            f,
            0,
            "$.investigation_id",
            format!("{id:?} does not match [A-Za-z0-9._-]+"),
        ));
    } else if let Some(dir) = dir_name {
        if dir != id {
            out.push(Violation::new(
                Code::InvestigationIdDirMismatch,
                f,
                0,
                "$.investigation_id",
                format!("stored under directory {dir:?}"),
            ));
        }
    }
    let t = &envelope.trigger;
    for (name, value) in [("source", &t.source), ("reference", &t.reference)] {
        if value.trim().is_empty() {
            out.push(Violation::new(
                Code::TriggerFieldEmpty,
                f,
                0,
                &format!("$.trigger.{name}"),
                "must be non-empty",
            ));
        }
    }
    let a = &envelope.agent;
    for (name, value) in [
        ("agent_version", &a.agent_version),
        ("model", &a.model),
        ("prompt_version", &a.prompt_version),
    ] {
        if value.trim().is_empty() {
            out.push(Violation::new(
                Code::AgentFieldEmpty,
                f,
                0,
                &format!("$.agent.{name}"),
                "must be non-empty",
            ));
        }
    }
    let chain = &envelope.authority.authority_chain;
    match chain.last() {
        None => out.push(Violation::new(
            Code::AuthorityChainEmpty,
            f,
            0,
            "$.authority.authority_chain",
            "authority chain must name at least the acting agent",
        )),
        Some(last) if last.kind != PrincipalKind::Agent => out.push(Violation::new(
            Code::AuthorityChainTailNotAgent,
            f,
            0,
            &format!("$.authority.authority_chain[{}]", chain.len() - 1),
            format!("final principal {:?} is not of type agent", last.principal),
        )),
        Some(_) => {}
    }
    for (i, source) in envelope
        .context_snapshot
        .retrieval_context
        .sources
        .iter()
        .enumerate()
    {
        if source.chunks_retrieved != source.chunk_ids.len() as u64 {
            out.push(Violation::new(
                Code::RetrievalChunkCountMismatch,
                f,
                0,
                &format!("$.context_snapshot.retrieval_context.sources[{i}]"),
                format!(
                    "chunks_retrieved={} but {} chunk ids listed",
                    source.chunks_retrieved,
                    source.chunk_ids.len()
                ),
            ));
        }
    }
    if let Some(profile) = &envelope.domain_profile {
        for key in profile.extensions.keys() {
            let ok = key
                .split_once('.')
                .is_some_and(|(ns, field)| ns == profile.profile_id && !field.is_empty());
            if !ok {
                out.push(Violation::new(
                    Code::ProfileExtensionKeyInvalid,
                    f,
                    0,
                    &format!("$.domain_profile.extensions.{key}"),
                    format!("key must have the form {}.<field>", profile.profile_id),
                ));
            }
        }
    }
    out
}

/// Checks one plan. `expected_version` is the version the plan must carry
/// at its position; `steps` holds every step recorded so far.
pub fn check_plan(plan: &Plan, line: usize, expected_version: u32, steps: &StepIndex) -> Vec<Violation> {
    let f = PLANS_FILE;
    let mut out = Vec::new();
    let v = plan.plan_version;
    if v != expected_version {
        out.push(Violation::new(
            Code::PlanVersionNoncontiguous,
            f,
            line,
            "$.plan_version",
            format!("expected plan_version {expected_version}, found {v}"),
        ));
    }
    if v <= 1 {
        if plan.supersedes.is_some() || plan.revision_trigger.is_some() {
            out.push(Violation::new(
                Code::PlanV1HasRevision,
                f,
                line,
                "$",
                "the first plan cannot supersede anything or name a revision trigger",
            ));
        }
        return out;
    }
    if plan.supersedes != Some(v - 1) {
        out.push(Violation::new(
            Code::PlanSupersedesMismatch,
            f,
            line,
            "$.supersedes",
            format!("plan v{v} must supersede v{}, found {:?}", v - 1, plan.supersedes),
        ));
    }
    match plan.revision_trigger.as_deref() {
        None => out.push(Violation::new(
            Code::RevisionTriggerMissing,
            f,
            line,
            "$.revision_trigger",
            format!("plan v{v} must name the step that caused the re-plan"),
        )),
        Some(trigger) => match steps.get(trigger) {
            None => out.push(Violation::new(
                Code::RevisionTriggerUnknown,
                f,
                line,
                "$.revision_trigger",
                format!("{trigger} is not a recorded step"),
            )),
            Some((trigger_seq, trigger_plan)) => {
                let later_plan_earlier = steps
                    .steps_using_plan_at_or_above(v)
                    .any(|seq| seq <= trigger_seq);
                if trigger_plan >= v || later_plan_earlier {
                    out.push(Violation::new(
                        Code::RevisionTriggerOrder,
                        f,
                        line,
                        "$.revision_trigger",
                        format!("{trigger} was not recorded before plan v{v}"),
                    ));
                }
            }
        },
    }
    out
}

/// Checks one step against its expected sequence, the known plan versions
/// and the ids recorded before it.
pub fn check_step(
    step: &Step,
    line: usize,
    expected_sequence: u32,
    plan_versions: &BTreeSet<u32>,
    prior_ids: &HashSet<String>,
) -> Vec<Violation> {
    let f = STEPS_FILE;
    let mut out = Vec::new();
    match parse_step_id(&step.step_id) {
        None => out.push(Violation::new(
            Code::StepIdInvalid,
            f,
            line,
            "$.step_id",
            format!("{:?} does not match step_NNN", step.step_id),
        )),
        Some(_) if prior_ids.contains(&step.step_id) => out.push(Violation::new(
            Code::StepIdDuplicate,
            f,
            line,
            "$.step_id",
            format!("{} already recorded", step.step_id),
        )),
        Some(n) if n != step.sequence => out.push(Violation::new(
            Code::StepIdSequenceMismatch,
            f,
            line,
            "$.step_id",
            format!("{} does not encode sequence {}", step.step_id, step.sequence),
        )),
        Some(_) => {}
    }
    if step.sequence != expected_sequence {
        out.push(Violation::new(
            Code::StepSequenceGap,
            f,
            line,
            "$.sequence",
            format!("expected sequence {expected_sequence}, found {}", step.sequence),
        ));
    }
    if !plan_versions.contains(&step.plan_version) {
        out.push(Violation::new(
            Code::StepPlanUnknown,
            f,
            line,
            "$.plan_version",
            format!("plan v{} was never recorded", step.plan_version),
        ));
    }
    for (code, name, text) in [
        (Code::StepIntentEmpty, "intent", &step.intent),
        (Code::StepObservationEmpty, "observation", &step.observation),
        (Code::StepInferenceEmpty, "inference", &step.inference),
    ] {
        if text.trim().is_empty() {
            out.push(Violation::new(code, f, line, &format!("$.{name}"), "must be non-empty"));
        }
    }
    for (i, call) in step.tool_calls.iter().enumerate() {
        if call.tool.trim().is_empty() {
            out.push(Violation::new(
                Code::ToolNameEmpty,
                f,
                line,
                &format!("$.tool_calls[{i}].tool"),
                "must be non-empty",
            ));
        }
    }
    out
}

pub fn check_verdict(verdict: &Verdict, steps: &StepIndex) -> Vec<Violation> {
    let f = VERDICT_FILE;
    let mut out = Vec::new();
    if verdict.evidence_chain.is_empty() {
        out.push(Violation::new(
            Code::EvidenceEmpty,
            f,
            0,
            "$.evidence_chain",
            "verdict must cite at least one step",
        ));
    }
    let mut seen = HashSet::new();
    let mut last_seq = 0u32;
    for (i, id) in verdict.evidence_chain.iter().enumerate() {
        let path = format!("$.evidence_chain[{i}]");
        if !seen.insert(id.as_str()) {
            out.push(Violation::new(
                Code::EvidenceDuplicate,
                f,
                0,
                &path,
                format!("{id} cited twice"),
            ));
            continue;
        }
        match steps.get(id) {
            None => out.push(Violation::new(
                Code::EvidenceDanglingStep,
                f,
                0,
                &path,
                format!("{id} is not a recorded step"),
            )),
            Some((seq, _)) => {
                if seq <= last_seq {
                    out.push(Violation::new(
                        Code::EvidenceOrder,
                        f,
                        0,
                        &path,
                        format!("{id} is out of step order"),
                    ));
                }
                last_seq = last_seq.max(seq);
            }
        }
    }
    for (i, alt) in verdict.alternatives_rejected.iter().enumerate() {
        if !steps.contains(&alt.rejected_by) {
            out.push(Violation::new(
                Code::RejectedByUnknown,
                f,
                0,
                &format!("$.alternatives_rejected[{i}].rejected_by"),
                format!("{} is not a recorded step", alt.rejected_by),
            ));
        }
    }
    if !(0.0..=1.0).contains(&verdict.confidence) {
        out.push(Violation::new(
            Code::ConfidenceOutOfRange,
            f,
            0,
            "$.confidence",
            format!("{} is outside [0, 1]", verdict.confidence),
        ));
    }
    out
}

pub fn check_metadata(metadata: &Metadata) -> Vec<Violation> {
    let f = METADATA_FILE;
    let mut out = Vec::new();
    if !KNOWN_SCHEMA_PREFIXES
        .iter()
        .any(|p| metadata.schema_version.starts_with(p))
    {
        out.push(Violation::new(
            Code::SchemaVersionUnknown,
            f,
            0,
            "$.schema_version",
            format!("unsupported schema version {:?}", metadata.schema_version),
        ));
    }
    if let Some(done) = metadata.completed_at {
        if done < metadata.created_at {
            out.push(Violation::new(
                Code::MetadataTimestampOrder,
                f,
                0,
                "$.completed_at",
                "completed_at precedes created_at",
            ));
        }
    }
    if let Some(cost) = metadata.cost_usd {
        if !(cost >= 0.0 && cost.is_finite()) {
            out.push(Violation::new(
                Code::CostNegative,
                f,
                0,
                "$.cost_usd",
                format!("{cost} is not a non-negative amount"),
            ));
        }
    }
    if let Some(fidelity) = &metadata.fidelity {
        for (name, rate) in fidelity.rates() {
            if !(0.0..=1.0).contains(&rate) {
                out.push(Violation::new(
                    Code::FidelityOutOfRange,
                    f,
                    0,
                    &format!("$.fidelity.{name}"),
                    format!("{rate} is outside [0, 1]"),
                ));
            }
        }
    }
    out
}

/// Every violation in the record, ordered by file then locator. Empty iff
/// the record satisfies all invariants.
pub fn validate_record(record: &ExecutionRecord) -> Vec<Violation> {
    let mut out = check_envelope(&record.envelope, record.dir_name.as_deref());

    let steps = StepIndex::from_steps(&record.steps);
    for (i, plan) in record.plans.iter().enumerate() {
        out.extend(check_plan(plan, i + 1, i as u32 + 1, &steps));
    }

    let plan_versions: BTreeSet<u32> = record.plans.iter().map(|p| p.plan_version).collect();
    let mut prior_ids = HashSet::new();
    let mut expected = 1;
    for (i, step) in record.steps.iter().enumerate() {
        out.extend(check_step(step, i + 1, expected, &plan_versions, &prior_ids));
        prior_ids.insert(step.step_id.clone());
        expected = step.sequence.max(expected) + 1;
    }

    if let Some(verdict) = &record.verdict {
        out.extend(check_verdict(verdict, &steps));
    }
    match &record.metadata {
        Some(metadata) => out.extend(check_metadata(metadata)),
        None => out.push(Violation::new(
            Code::MetadataMissing,
            METADATA_FILE,
            0,
            "$",
            "metadata.json missing",
        )),
    }
    out.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
    out
}
