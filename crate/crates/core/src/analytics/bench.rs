//! Storage comparison between cumulative checkpoints and records.
//!
//! The checkpoint model persists, at every step k, the whole message
//! history 1..k plus a fixed per-checkpoint overhead for channel state, so
//! its total grows quadratically in the step count. A record stores each
//! step once. Both sides are synthesized from the same per-step payload
//! sizes and measured as serialized bytes.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::record::{
    canonical_line, jsonl, step_id_for, AgentIdentity, Authority, ContextSnapshot, Envelope,
    ExecutionRecord, InvestigationId, Metadata, Plan, Principal, PrincipalKind, RetrievalContext,
    RetrievalSource, Step, Timestamp, TokenUsage, ToolCall, Trigger, Verdict,
};

/// Generator settings. The defaults are frozen: a 10-step run yields a
/// checkpoint total near 560 KB and a record near 90 KB.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchParams {
    pub seed: u64,
    pub user_prompt_bytes: usize,
    pub assistant_bytes: usize,
    pub tool_bytes: usize,
    pub checkpoint_overhead_bytes: usize,
    /// Length of each of intent, observation and inference.
    pub reasoning_bytes: usize,
    pub tool_input_bytes: usize,
}

impl Default for BenchParams {
    fn default() -> Self {
        BenchParams {
            seed: 7,
            user_prompt_bytes: 1200,
            assistant_bytes: 1400,
            tool_bytes: 8200,
            checkpoint_overhead_bytes: 1500,
            reasoning_bytes: 160,
            tool_input_bytes: 40,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StorageBenchResult {
    pub steps: usize,
    pub checkpoint_total_bytes: u64,
    pub aer_bytes_with_raw: u64,
    pub aer_bytes_without_raw: u64,
    /// checkpoint_total_bytes / aer_bytes_with_raw
    pub ratio: f64,
    pub ratio_without_raw: f64,
}

fn text(rng: &mut ChaCha8Rng, len: usize) -> String {
    const ALPHABET: &[u8] = b"abcdefghijklmnopqrstuvwxyz     ";
    (0..len)
        .map(|_| ALPHABET[rng.gen_range(0..ALPHABET.len())] as char)
        .collect()
}

fn message(role: &str, content: String) -> Value {
    json!({"role": role, "content": content})
}

/// Σ_{k=1..K} |serialize(M_k)| + K·overhead, with M_k the user prompt
/// followed by k assistant/tool message pairs.
fn checkpoint_total(params: &BenchParams, k: usize, rng: &mut ChaCha8Rng) -> u64 {
    let mut messages = vec![message("user", text(rng, params.user_prompt_bytes))];
    let mut total = 0u64;
    for _ in 0..k {
        messages.push(message("assistant", text(rng, params.assistant_bytes)));
        messages.push(message("tool", text(rng, params.tool_bytes)));
        let snapshot = serde_json::to_vec(&messages).expect("plain JSON serializes");
        total += snapshot.len() as u64 + params.checkpoint_overhead_bytes as u64;
    }
    total
}

/// A valid K-step record with the configured payload sizes.
pub fn synth_record(params: &BenchParams, k: usize, rng: &mut ChaCha8Rng) -> ExecutionRecord {
    let id = format!("BENCH-{k}");
    let envelope = Envelope {
        investigation_id: InvestigationId::new_unchecked(id.clone()),
        trigger: Trigger {
            source: "jira-sd".into(),
            reference: id.clone(),
            summary: text(rng, 60),
            severity: Some("P2".into()),
        },
        agent: AgentIdentity {
            agent_version: "rca-v2.4.1".into(),
            model: "codex-5.3".into(),
            prompt_version: "rca-prompt-v7.2".into(),
        },
        authority: Authority {
            delegated_by: "oncall:sre".into(),
            delegation_mechanism: "iam-policy:rca-agent-role".into(),
            permissions_scope: vec!["monitoring:read".into()],
            authority_chain: vec![
                Principal {
                    principal: "incident-auto-trigger".into(),
                    kind: PrincipalKind::System,
                },
                Principal {
                    principal: "rca-agent".into(),
                    kind: PrincipalKind::Agent,
                },
            ],
        },
        context_snapshot: ContextSnapshot {
            retrieval_context: RetrievalContext {
                sources: vec![RetrievalSource {
                    kind: "rag".into(),
                    query: text(rng, 30),
                    chunks_retrieved: 3,
                    chunk_ids: vec!["rb-1".into(), "rb-2".into(), "rb-3".into()],
                    total_tokens: 2840,
                }],
            },
            system_context: BTreeMap::new(),
        },
        domain_profile: None,
    };
    let plan = Plan {
        plan_version: 1,
        supersedes: None,
        revision_trigger: None,
        rationale: text(rng, params.reasoning_bytes),
        steps_intended: (1..=k).map(|i| format!("check_{i}")).collect(),
    };
    let steps: Vec<Step> = (1..=k as u32)
        .map(|seq| Step {
            step_id: step_id_for(seq),
            plan_version: 1,
            sequence: seq,
            intent: text(rng, params.reasoning_bytes),
            tool_calls: vec![ToolCall {
                tool: format!("tool_{}", seq % 5),
                input: Value::String(text(rng, params.tool_input_bytes)),
                output: Value::String(text(rng, params.tool_bytes)),
                duration_ms: 100 + u64::from(seq),
            }],
            observation: text(rng, params.reasoning_bytes),
            inference: text(rng, params.reasoning_bytes),
            tokens: TokenUsage {
                input: 800,
                output: 200,
            },
        })
        .collect();
    let evidence_from = k.saturating_sub(3).max(1) as u32;
    let verdict = Verdict {
        root_cause_category: "Infrastructure > Memory > OOM Kill".into(),
        root_cause_summary: text(rng, params.reasoning_bytes),
        confidence: 0.9,
        affected_components: vec!["node3".into()],
        evidence_chain: (evidence_from..=k as u32).map(step_id_for).collect(),
        alternatives_rejected: Vec::new(),
        remediation: vec![text(rng, 40)],
    };
    let mut metadata = Metadata::new(Timestamp::from_millis(1_772_442_845_000));
    metadata.completed_at = Some(Timestamp::from_millis(1_772_442_911_482));
    metadata.duration_ms = Some(66_482);
    metadata.cost_usd = Some(0.042);
    ExecutionRecord {
        envelope,
        plans: vec![plan],
        steps,
        verdict: Some(verdict),
        metadata: Some(metadata),
        dir_name: None,
    }
}

/// Bytes of the five canonical files.
pub fn record_bytes(record: &ExecutionRecord) -> u64 {
    let mut total = canonical_line(&record.envelope).map_or(0, |s| s.len());
    total += jsonl(&record.plans).map_or(0, |s| s.len());
    total += jsonl(&record.steps).map_or(0, |s| s.len());
    if let Some(v) = &record.verdict {
        total += canonical_line(v).map_or(0, |s| s.len());
    }
    if let Some(m) = &record.metadata {
        total += canonical_line(m).map_or(0, |s| s.len());
    }
    total as u64
}

fn without_raw(record: &ExecutionRecord) -> ExecutionRecord {
    let mut r = record.clone();
    for step in &mut r.steps {
        for call in &mut step.tool_calls {
            let bytes = call.output.as_str().map_or(0, str::len);
            call.output = json!({"truncated": true, "bytes": bytes});
        }
    }
    r
}

pub fn storage_bench(params: &BenchParams, k: usize) -> StorageBenchResult {
    let k = k.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let checkpoint_total_bytes = checkpoint_total(params, k, &mut rng);
    let record = synth_record(params, k, &mut rng);
    let aer_bytes_with_raw = record_bytes(&record);
    let aer_bytes_without_raw = record_bytes(&without_raw(&record));
    StorageBenchResult {
        steps: k,
        checkpoint_total_bytes,
        aer_bytes_with_raw,
        aer_bytes_without_raw,
        ratio: checkpoint_total_bytes as f64 / aer_bytes_with_raw as f64,
        ratio_without_raw: checkpoint_total_bytes as f64 / aer_bytes_without_raw as f64,
    }
}

/// Least-squares slope of ln(y) against ln(x).
pub fn fit_exponent(points: &[(f64, f64)]) -> f64 {
    let logs: Vec<(f64, f64)> = points.iter().map(|(x, y)| (x.ln(), y.ln())).collect();
    let n = logs.len() as f64;
    let mx = logs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = logs.iter().map(|p| p.1).sum::<f64>() / n;
    let cov: f64 = logs.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = logs.iter().map(|(x, _)| (x - mx).powi(2)).sum();
    cov / var
}
