//! Reasoner backends: scripted (fixtures), echo (identity) and HTTP.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Duration;

use serde::Deserialize;
use serde_json::{json, Value};

use super::{BackendError, ReasonerBackend, ReplayContext, StepAnnotation, VerdictDraft};
use crate::record::ExecutionRecord;

/// Replies from a fixed script:
/// `{"steps": {"step_001": {"observation", "inference", "wants_replan"}, ...},
///   "verdict": {"root_cause_category", "confidence"}}`.
#[derive(Debug, Clone, Deserialize)]
pub struct ScriptedBackend {
    pub steps: BTreeMap<String, StepAnnotation>,
    #[serde(default)]
    pub verdict: Option<VerdictDraft>,
}

impl ScriptedBackend {
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn from_file(path: &Path) -> Result<Self, BackendError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| BackendError::Transport(format!("{}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| BackendError::Malformed(e.to_string()))
    }
}

impl ReasonerBackend for ScriptedBackend {
    fn annotate_step(&self, ctx: &ReplayContext<'_>) -> Result<StepAnnotation, BackendError> {
        let id = ctx.step_id.unwrap_or_default();
        self.steps
            .get(id)
            .cloned()
            .ok_or_else(|| BackendError::NotScripted(id.to_string()))
    }

    fn judge_final(&self, _ctx: &ReplayContext<'_>) -> Result<VerdictDraft, BackendError> {
        self.verdict
            .clone()
            .ok_or_else(|| BackendError::NotScripted("verdict".to_string()))
    }
}

/// Replays each record's own annotations and verdict: the identity
/// reasoner, whose mock replay must match every step and converge.
#[derive(Debug, Clone, Default)]
pub struct EchoBackend {
    records: BTreeMap<String, ExecutionRecord>,
}

impl EchoBackend {
    pub fn from_records<'a>(records: impl IntoIterator<Item = &'a ExecutionRecord>) -> Self {
        EchoBackend {
            records: records
                .into_iter()
                .map(|r| (r.id().to_string(), r.clone()))
                .collect(),
        }
    }

    fn record(&self, ctx: &ReplayContext<'_>) -> Result<&ExecutionRecord, BackendError> {
        let id = ctx.envelope.investigation_id.as_str();
        self.records
            .get(id)
            .ok_or_else(|| BackendError::NotScripted(id.to_string()))
    }
}

impl ReasonerBackend for EchoBackend {
    fn annotate_step(&self, ctx: &ReplayContext<'_>) -> Result<StepAnnotation, BackendError> {
        let record = self.record(ctx)?;
        let id = ctx.step_id.unwrap_or_default();
        let step = record
            .step(id)
            .ok_or_else(|| BackendError::NotScripted(id.to_string()))?;
        Ok(StepAnnotation {
            observation: step.observation.clone(),
            inference: step.inference.clone(),
            wants_replan: record.triggered_replan(id),
            tokens: None,
        })
    }

    fn judge_final(&self, ctx: &ReplayContext<'_>) -> Result<VerdictDraft, BackendError> {
        let verdict = self
            .record(ctx)?
            .verdict
            .as_ref()
            .ok_or_else(|| BackendError::NotScripted("verdict".to_string()))?;
        Ok(VerdictDraft {
            root_cause_category: verdict.root_cause_category.clone(),
            confidence: verdict.confidence,
            evidence_chain: Some(verdict.evidence_chain.clone()),
            alternatives_rejected: Some(verdict.alternatives_rejected.clone()),
        })
    }
}

const STEP_INSTRUCTIONS: &str = "You are re-analysing one step of a recorded investigation. \
The tool calls below carry their recorded outputs. Reply with a fenced JSON object \
{\"observation\": string, \"inference\": string, \"wants_replan\": boolean}.";

const VERDICT_INSTRUCTIONS: &str = "All steps have been re-analysed. Reply with a fenced JSON \
object {\"root_cause_category\": string (levels separated by \" > \"), \"confidence\": number \
in [0,1], \"evidence_chain\": [step ids], \"alternatives_rejected\": [{\"hypothesis\", \
\"rejected_by\", \"reason\"}]}.";

/// Chat-completion style endpoint. The system message is the prompt
/// version under test (or `system_prompt` when set); the user message is
/// the instructions followed by the serialized [`ReplayContext`]. The reply
/// content is parsed as a JSON object, fenced or bare.
#[derive(Debug, Clone)]
pub struct HttpBackend {
    pub url: String,
    pub api_key: Option<String>,
    pub system_prompt: Option<String>,
    pub timeout: Duration,
}

impl HttpBackend {
    pub fn new(url: impl Into<String>) -> Self {
        HttpBackend {
            url: url.into(),
            api_key: std::env::var("AER_REASONER_API_KEY").ok(),
            system_prompt: None,
            timeout: Duration::from_secs(120),
        }
    }

    fn complete(&self, ctx: &ReplayContext<'_>, instructions: &str) -> Result<(Value, Option<crate::record::TokenUsage>), BackendError> {
        let context = serde_json::to_string(ctx).map_err(|e| BackendError::Malformed(e.to_string()))?;
        let system = self
            .system_prompt
            .clone()
            .unwrap_or_else(|| ctx.new_identity.prompt_version.clone());
        let body = json!({
            "model": ctx.new_identity.model,
            "messages": [
                {"role": "system", "content": system},
                {"role": "user", "content": format!("{instructions}\n\n{context}")},
            ],
        });
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(self.timeout))
            .build()
            .into();
        let mut request = agent.post(&self.url).header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            request = request.header("Authorization", &format!("Bearer {key}"));
        }
        let mut response = request
            .send(body.to_string())
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        let text = response
            .body_mut()
            .read_to_string()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        let reply: Value = serde_json::from_str(&text).map_err(|e| BackendError::Malformed(e.to_string()))?;
        let content = reply
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .ok_or_else(|| BackendError::Malformed("no choices[0].message.content".into()))?;
        let usage = match (
            reply.pointer("/usage/prompt_tokens").and_then(Value::as_u64),
            reply.pointer("/usage/completion_tokens").and_then(Value::as_u64),
        ) {
            (Some(input), Some(output)) => Some(crate::record::TokenUsage { input, output }),
            _ => None,
        };
        Ok((extract_json_object(content)?, usage))
    }
}

/// The first fenced code block's contents, or the outermost `{...}` span.
pub(crate) fn extract_json_object(content: &str) -> Result<Value, BackendError> {
    let fenced = content.split("```").nth(1).map(|block| {
        let block = block.trim_start();
        block.strip_prefix("json").unwrap_or(block)
    });
    let candidate = match fenced {
        Some(b) => b.trim(),
        None => match (content.find('{'), content.rfind('}')) {
            (Some(start), Some(end)) if start < end => &content[start..=end],
            _ => return Err(BackendError::Malformed("no JSON object in reply".into())),
        },
    };
    let value: Value =
        serde_json::from_str(candidate).map_err(|e| BackendError::Malformed(e.to_string()))?;
    if value.is_object() {
        Ok(value)
    } else {
        Err(BackendError::Malformed("reply is not a JSON object".into()))
    }
}

impl ReasonerBackend for HttpBackend {
    fn annotate_step(&self, ctx: &ReplayContext<'_>) -> Result<StepAnnotation, BackendError> {
        let (value, usage) = self.complete(ctx, STEP_INSTRUCTIONS)?;
        let mut annotation: StepAnnotation =
            serde_json::from_value(value).map_err(|e| BackendError::Malformed(e.to_string()))?;
        if annotation.observation.trim().is_empty() || annotation.inference.trim().is_empty() {
            return Err(BackendError::Malformed("empty observation or inference".into()));
        }
        annotation.tokens = annotation.tokens.or(usage);
        Ok(annotation)
    }

    fn judge_final(&self, ctx: &ReplayContext<'_>) -> Result<VerdictDraft, BackendError> {
        let (value, _) = self.complete(ctx, VERDICT_INSTRUCTIONS)?;
        serde_json::from_value(value).map_err(|e| BackendError::Malformed(e.to_string()))
    }
}
