//! Step and verdict comparators.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{StepAnnotation, StepComparison, StepOutcome, VerdictDraft, VerdictOutcome};
use crate::record::{category_levels, Step, Verdict};

/// Decides step equivalence and verdict convergence. The default is
/// [`JaccardComparator`]; a judge-style implementation can substitute.
pub trait Comparator: Sync {
    fn compare_step(&self, original: &Step, triggered_replan: bool, new: &StepAnnotation) -> StepComparison;
    fn compare_verdict(&self, original: &Verdict, new: &VerdictDraft) -> VerdictOutcome;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ComparatorConfig {
    pub theta_observation: f64,
    pub theta_inference: f64,
    /// Leading category levels that must agree.
    pub verdict_depth: usize,
    pub confidence_tolerance: f64,
}

impl Default for ComparatorConfig {
    fn default() -> Self {
        ComparatorConfig {
            theta_observation: 0.35,
            theta_inference: 0.2,
            verdict_depth: 2,
            confidence_tolerance: 0.15,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct JaccardComparator {
    pub config: ComparatorConfig,
}

impl JaccardComparator {
    pub fn new(config: ComparatorConfig) -> Self {
        JaccardComparator { config }
    }
}

const STOPWORDS: &[&str] = &[
    "a", "an", "and", "are", "as", "at", "be", "by", "for", "from", "in", "is", "it", "of", "on",
    "or", "that", "the", "this", "to", "was", "with",
];

/// Lowercase alphanumeric runs, minus common function words, with a
/// trailing plural `s` folded on longer words.
pub fn tokens(text: &str) -> BTreeSet<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .filter(|t| !STOPWORDS.contains(&t.as_str()))
        .map(|t| {
            let plural = t.len() > 3 && t.ends_with('s') && !["ss", "us", "is"].iter().any(|e| t.ends_with(e));
            if plural {
                t[..t.len() - 1].to_string()
            } else {
                t
            }
        })
        .collect()
}

/// Token-set Jaccard similarity; two token-less texts are identical.
pub fn jaccard(a: &str, b: &str) -> f64 {
    let (x, y) = (tokens(a), tokens(b));
    let union = x.union(&y).count();
    if union == 0 {
        return 1.0;
    }
    x.intersection(&y).count() as f64 / union as f64
}

const TOLERANCE_SLACK: f64 = 1e-9;

impl Comparator for JaccardComparator {
    fn compare_step(&self, original: &Step, triggered_replan: bool, new: &StepAnnotation) -> StepComparison {
        let obs = jaccard(&original.observation, &new.observation);
        let inf = jaccard(&original.inference, &new.inference);
        let mut notes = Vec::new();
        if triggered_replan && !new.wants_replan {
            notes.push("new model skips re-plan".to_string());
        } else if !triggered_replan && new.wants_replan {
            notes.push("new model adds re-plan".to_string());
        }
        if obs < self.config.theta_observation {
            notes.push(format!("observation differs (jaccard {obs:.2})"));
        }
        if inf < self.config.theta_inference {
            notes.push(format!("inference differs (jaccard {inf:.2})"));
        }
        let outcome = if notes.is_empty() {
            StepOutcome::Equivalent
        } else {
            StepOutcome::Divergent
        };
        StepComparison {
            step_id: original.step_id.clone(),
            outcome,
            note: if notes.is_empty() {
                "functionally equivalent".to_string()
            } else {
                notes.join("; ")
            },
            original_text: original.inference.clone(),
            new_text: Some(new.inference.clone()),
            original_triggered_replan: triggered_replan,
            new_wants_replan: Some(new.wants_replan),
            tokens: new.tokens,
            call_diffs: Vec::new(),
        }
    }

    fn compare_verdict(&self, original: &Verdict, new: &VerdictDraft) -> VerdictOutcome {
        let depth = self.config.verdict_depth;
        let lower = |c: &str| -> Vec<String> {
            category_levels(c).iter().take(depth).map(|l| l.to_lowercase()).collect()
        };
        let (a, b) = (lower(&original.root_cause_category), lower(&new.root_cause_category));
        let same_path = a.len() == depth && a == b;
        let close = (original.confidence - new.confidence).abs()
            <= self.config.confidence_tolerance + TOLERANCE_SLACK;
        if same_path && close {
            VerdictOutcome::Converged
        } else {
            VerdictOutcome::Diverged
        }
    }
}
