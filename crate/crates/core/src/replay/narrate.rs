//! Read-only walkthrough of a record.

use std::fmt::Write;

use crate::record::canonical::format_f64;
use crate::record::{ExecutionRecord, Plan, PrincipalKind};

fn number(x: f64) -> String {
    format_f64(x).unwrap_or_else(|_| "NaN".to_string())
}

fn kind(k: PrincipalKind) -> &'static str {
    match k {
        PrincipalKind::System => "system",
        PrincipalKind::Team => "team",
        PrincipalKind::Human => "human",
        PrincipalKind::Agent => "agent",
    }
}

fn write_plan(out: &mut String, plan: &Plan) {
    out.push('\n');
    let _ = write!(out, "plan v{}", plan.plan_version);
    if let Some(s) = plan.supersedes {
        let _ = write!(out, " (supersedes v{s}");
        match &plan.revision_trigger {
            Some(t) => {
                let _ = write!(out, ", triggered by {t})");
            }
            None => out.push(')'),
        }
    }
    let _ = writeln!(out, ": {}", plan.rationale);
    if !plan.steps_intended.is_empty() {
        let _ = writeln!(out, "  intended: {}", plan.steps_intended.join(", "));
    }
}

/// Deterministic plain-text walkthrough: trigger and identity, each plan
/// where it takes effect, each step as intent, tool calls, observation and
/// inference, then the verdict. Partial records narrate what exists.
pub fn narrate(record: &ExecutionRecord) -> String {
    let mut out = String::new();
    let env = &record.envelope;
    let _ = writeln!(out, "Investigation {}", env.investigation_id);
    let t = &env.trigger;
    let severity = t.severity.as_deref().map(|s| format!(" [{s}]")).unwrap_or_default();
    let _ = writeln!(out, "trigger: {} {}{severity}: {}", t.source, t.reference, t.summary);
    let a = &env.agent;
    let _ = writeln!(
        out,
        "agent: {} (model {}, prompt {})",
        a.agent_version, a.model, a.prompt_version
    );
    let chain: Vec<String> = env
        .authority
        .authority_chain
        .iter()
        .map(|p| format!("{} ({})", p.principal, kind(p.kind)))
        .collect();
    let _ = writeln!(out, "authority: {}", chain.join(" -> "));
    let _ = writeln!(
        out,
        "delegated by {} via {}",
        env.authority.delegated_by, env.authority.delegation_mechanism
    );
    for s in &env.context_snapshot.retrieval_context.sources {
        let _ = writeln!(
            out,
            "context: {} {:?}: {} chunk(s) [{}], {} tokens",
            s.kind,
            s.query,
            s.chunks_retrieved,
            s.chunk_ids.join(", "),
            s.total_tokens
        );
    }

    let mut shown = 0usize;
    for step in &record.steps {
        while shown < record.plans.len() && record.plans[shown].plan_version <= step.plan_version {
            write_plan(&mut out, &record.plans[shown]);
            shown += 1;
        }
        out.push('\n');
        let _ = writeln!(out, "{} [plan v{}]", step.step_id, step.plan_version);
        let _ = writeln!(out, "  intent: {}", step.intent);
        for call in &step.tool_calls {
            let _ = writeln!(out, "  tool: {} ({} ms)", call.tool, call.duration_ms);
        }
        let _ = writeln!(out, "  observation: {}", step.observation);
        let _ = writeln!(out, "  inference: {}", step.inference);
    }
    for plan in &record.plans[shown..] {
        write_plan(&mut out, plan);
    }

    out.push('\n');
    match &record.verdict {
        None => out.push_str("verdict: absent\n"),
        Some(v) => {
            let _ = writeln!(
                out,
                "verdict: {} (confidence {})",
                v.root_cause_category,
                number(v.confidence)
            );
            let _ = writeln!(out, "  summary: {}", v.root_cause_summary);
            let _ = writeln!(out, "  evidence: {}", v.evidence_chain.join(" -> "));
            for alt in &v.alternatives_rejected {
                let _ = writeln!(
                    out,
                    "  rejected: {} (by {}): {}",
                    alt.hypothesis, alt.rejected_by, alt.reason
                );
            }
            if !v.affected_components.is_empty() {
                let _ = writeln!(out, "  affected: {}", v.affected_components.join(", "));
            }
            for r in &v.remediation {
                let _ = writeln!(out, "  remediation: {r}");
            }
        }
    }
    out
}
