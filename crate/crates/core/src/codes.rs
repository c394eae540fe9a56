//! Stable error and violation codes.
//!
//! Codes are shared with out-of-process writers through `assets/errors.json`;
//! the string form of every variant is part of the on-disk contract.

use std::fmt;

use serde::{Deserialize, Serialize};

macro_rules! codes {
    ($($variant:ident => $text:literal,)*) => {
        /// Every code the toolkit can emit, as validation violations or as
        /// operation errors.
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        pub enum Code {
            $(
                #[serde(rename = $text)]
                $variant,
            )*
        }

        impl Code {
            pub const ALL: &'static [Code] = &[$(Code::$variant,)*];

            pub fn as_str(self) -> &'static str {
                match self {
                    $(Code::$variant => $text,)*
                }
            }

            pub fn parse(s: &str) -> Option<Code> {
                match s {
                    $($text => Some(Code::$variant),)*
                    _ => None,
                }
            }
        }
    };
}

codes! {
    // envelope.json
    EnvelopeMissing => "ENVELOPE_MISSING",
    InvestigationIdInvalid => "INVESTIGATION_ID_INVALID",
    InvestigationIdDirMismatch => "INVESTIGATION_ID_DIR_MISMATCH",
    TriggerFieldEmpty => "TRIGGER_FIELD_EMPTY",
    AgentFieldEmpty => "AGENT_FIELD_EMPTY",
    AuthorityChainEmpty => "AUTHORITY_CHAIN_EMPTY",
    AuthorityChainTailNotAgent => "AUTHORITY_CHAIN_TAIL_NOT_AGENT",
    RetrievalChunkCountMismatch => "RETRIEVAL_CHUNK_COUNT_MISMATCH",
    ProfileExtensionKeyInvalid => "PROFILE_EXTENSION_KEY_INVALID",
    // plans.jsonl
    PlanVersionNoncontiguous => "PLAN_VERSION_NONCONTIGUOUS",
    PlanV1HasRevision => "PLAN_V1_HAS_REVISION",
    PlanSupersedesMismatch => "PLAN_SUPERSEDES_MISMATCH",
    RevisionTriggerMissing => "REVISION_TRIGGER_MISSING",
    RevisionTriggerUnknown => "REVISION_TRIGGER_UNKNOWN",
    RevisionTriggerOrder => "REVISION_TRIGGER_ORDER",
    // steps.jsonl
    StepIdInvalid => "STEP_ID_INVALID",
    StepIdSequenceMismatch => "STEP_ID_SEQUENCE_MISMATCH",
    StepIdDuplicate => "STEP_ID_DUPLICATE",
    StepSequenceGap => "STEP_SEQUENCE_GAP",
    StepPlanUnknown => "STEP_PLAN_UNKNOWN",
    StepIntentEmpty => "STEP_INTENT_EMPTY",
    StepObservationEmpty => "STEP_OBSERVATION_EMPTY",
    StepInferenceEmpty => "STEP_INFERENCE_EMPTY",
    ToolNameEmpty => "TOOL_NAME_EMPTY",
    // verdict.json
    EvidenceEmpty => "EVIDENCE_EMPTY",
    EvidenceDanglingStep => "EVIDENCE_DANGLING_STEP",
    EvidenceOrder => "EVIDENCE_ORDER",
    EvidenceDuplicate => "EVIDENCE_DUPLICATE",
    RejectedByUnknown => "REJECTED_BY_UNKNOWN",
    ConfidenceOutOfRange => "CONFIDENCE_OUT_OF_RANGE",
    // metadata.json
    MetadataMissing => "METADATA_MISSING",
    SchemaVersionUnknown => "SCHEMA_VERSION_UNKNOWN",
    MetadataTimestampOrder => "METADATA_TIMESTAMP_ORDER",
    CostNegative => "COST_NEGATIVE",
    FidelityOutOfRange => "FIDELITY_OUT_OF_RANGE",
    // operation errors
    ParseError => "PARSE_ERROR",
    SessionConflict => "SESSION_CONFLICT",
    InvestigationExists => "INVESTIGATION_EXISTS",
    SessionState => "SESSION_STATE",
    SessionFinalized => "SESSION_FINALIZED",
    NotFound => "NOT_FOUND",
    FidelityWriteForbidden => "FIDELITY_WRITE_FORBIDDEN",
    MetadataFieldReserved => "METADATA_FIELD_RESERVED",
    RecordInvalid => "RECORD_INVALID",
    RedactionBreaksSchema => "REDACTION_BREAKS_SCHEMA",
    SelectorInvalid => "SELECTOR_INVALID",
    Io => "IO_ERROR",
}

impl fmt::Display for Code {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// The language-neutral code table shipped to other writers.
pub const ERRORS_JSON: &str = include_str!("../assets/errors.json");
