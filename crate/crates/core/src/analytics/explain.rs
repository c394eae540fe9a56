//! Direct lookups answering "why" questions about one record.

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::AnalyticsError;
use crate::record::{step_id_for, ExecutionRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "question", content = "step")]
pub enum Question {
    /// Why was step k taken?
    IntentOfStep(u32),
    /// Why did the plan change?
    PlanChange,
    /// Which evidence supports the verdict?
    Evidence,
    /// Under whose authority did the agent act?
    Authority,
    /// What context did the agent see?
    ContextSeen,
}

/// Returns exactly the structured fields that answer `question`.
pub fn explain(record: &ExecutionRecord, question: Question) -> Result<Value, AnalyticsError> {
    Ok(match question {
        Question::IntentOfStep(k) => {
            let step = record
                .step_by_sequence(k)
                .ok_or_else(|| AnalyticsError::StepNotFound(step_id_for(k)))?;
            json!({
                "step_id": step.step_id,
                "plan_version": step.plan_version,
                "intent": step.intent,
            })
        }
        Question::PlanChange => {
            let revisions: Vec<Value> = record
                .plans
                .iter()
                .filter(|p| p.plan_version > 1)
                .map(|p| {
                    let trigger = p.revision_trigger.as_deref().and_then(|t| record.step(t));
                    json!({
                        "plan_version": p.plan_version,
                        "supersedes": p.supersedes,
                        "rationale": p.rationale,
                        "revision_trigger": p.revision_trigger,
                        "trigger_observation": trigger.map(|s| s.observation.clone()),
                        "trigger_inference": trigger.map(|s| s.inference.clone()),
                    })
                })
                .collect();
            if revisions.is_empty() {
                json!({"revisions": [], "summary": "no revisions"})
            } else {
                json!({"revisions": revisions})
            }
        }
        Question::Evidence => match &record.verdict {
            None => json!({"evidence_chain": [], "summary": "no verdict"}),
            Some(v) => {
                let chain: Vec<Value> = v
                    .evidence_chain
                    .iter()
                    .map(|id| match record.step(id) {
                        Some(s) => json!({
                            "step_id": id,
                            "intent": s.intent,
                            "tools": s.tool_calls.iter().map(|c| c.tool.clone()).collect::<Vec<_>>(),
                            "observation": s.observation,
                            "inference": s.inference,
                        }),
                        None => json!({"step_id": id}),
                    })
                    .collect();
                json!({
                    "root_cause_category": v.root_cause_category,
                    "confidence": v.confidence,
                    "evidence_chain": chain,
                })
            }
        },
        Question::Authority => serde_json::to_value(&record.envelope.authority)
            .map_err(|e| AnalyticsError::Query(e.to_string()))?,
        Question::ContextSeen => serde_json::to_value(&record.envelope.context_snapshot)
            .map_err(|e| AnalyticsError::Query(e.to_string()))?,
    })
}
