//! Plain-text rendering of replay reports.

use std::fmt::Write;

use super::{ReplayMode, ReplayReport, StepOutcome, VerdictOutcome};
use crate::record::category_levels;

fn leaf(category: &str) -> &str {
    category_levels(category).last().copied().unwrap_or("(none)")
}

fn verdict_phrase(outcome: VerdictOutcome) -> &'static str {
    match outcome {
        VerdictOutcome::Converged => "Verdict converged.",
        VerdictOutcome::Diverged => "Verdict diverged.",
        VerdictOutcome::Absent => "Verdict absent.",
        VerdictOutcome::NotCompared => "Verdict not compared.",
    }
}

/// Header, one block per step (original line, new line, `>>` judgment),
/// the verdict block and the summary line.
pub fn render_report(report: &ReplayReport) -> String {
    let mut out = String::new();
    let title = match report.mode {
        ReplayMode::Narrate => "Narration",
        ReplayMode::Mock => "Mock replay",
        ReplayMode::Live => "Live replay",
    };
    let _ = writeln!(out, "{title}: {}", report.investigation_id);
    let _ = writeln!(
        out,
        "  original: {}, new: {}",
        report.original_identity.model, report.new_identity.model
    );
    for c in &report.step_comparisons {
        out.push('\n');
        match report.mode {
            ReplayMode::Live => {
                let _ = writeln!(out, "{}: {} call(s)", c.step_id, c.call_diffs.len());
                for d in &c.call_diffs {
                    let state = if d.identical { "identical" } else { "changed" };
                    let _ = writeln!(
                        out,
                        "  {}: {state} ({} -> {} bytes)",
                        d.tool, d.recorded_bytes, d.fresh_bytes
                    );
                }
            }
            _ => {
                let _ = writeln!(out, "{}: {:?}", c.step_id, c.original_text);
                match &c.new_text {
                    Some(t) => {
                        let _ = writeln!(out, "  new:     {t:?}");
                    }
                    None => out.push_str("  new:     (no annotation)\n"),
                }
            }
        }
        let judgment = match c.outcome {
            StepOutcome::Equivalent if report.mode == ReplayMode::Live => "Outputs identical".to_string(),
            StepOutcome::Equivalent => "Functionally equivalent".to_string(),
            StepOutcome::Divergent => format!("Divergence: {}", c.note),
            StepOutcome::ExecutorUnavailable => "Executor unavailable".to_string(),
        };
        let _ = writeln!(out, "  >> {judgment}");
    }

    if let Some(v) = &report.verdict {
        out.push('\n');
        let _ = writeln!(
            out,
            "Verdict: {} ({:.2})",
            leaf(&v.original_category),
            v.original_confidence
        );
        match (&v.new_category, v.new_confidence, &v.error) {
            (Some(cat), Some(conf), _) => {
                let _ = writeln!(out, "  new:     Verdict: {} ({conf:.2})", leaf(cat));
            }
            (_, _, Some(e)) => {
                let _ = writeln!(out, "  new:     ({e})");
            }
            _ => out.push_str("  new:     (none)\n"),
        }
        let judgment = match report.verdict_outcome {
            VerdictOutcome::Converged => "Verdict converged",
            _ => "Verdict diverged",
        };
        let _ = writeln!(out, "  >> {judgment}");
    }

    out.push('\n');
    let _ = writeln!(
        out,
        "Summary: {}/{} matched. {}",
        report.summary.matched,
        report.summary.total,
        verdict_phrase(report.verdict_outcome)
    );
    out
}
