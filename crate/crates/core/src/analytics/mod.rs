//! Population-level queries over a corpus of records.

mod bench;
mod explain;
mod query;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use bench::{fit_exponent, storage_bench, synth_record, BenchParams, StorageBenchResult};
pub use explain::{explain, Question};
pub use query::{derived_fields, eval_predicate, record_document, resolve_path, run_query, Predicate, Query, QueryResult};

use crate::record::{parse_record, step_id_for, validate_record, ExecutionRecord};
use crate::replay::{ReplayReport, VerdictOutcome};
use crate::store::StoreConfig;

#[derive(Debug, Error)]
pub enum AnalyticsError {
    #[error("bucket width {0} does not divide [0,1] evenly")]
    BucketWidth(f64),
    #[error("duplicate expert label for {0}")]
    DuplicateLabel(String),
    #[error("n-gram length must be at least 1")]
    NgramLength,
    #[error("no replay reports")]
    NoReports,
    #[error("no step {0}")]
    StepNotFound(String),
    #[error("invalid query: {0}")]
    Query(String),
    #[error("{0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exclusion {
    pub investigation_id: String,
    pub reason: String,
}

/// The valid records under a store root. Records that fail to parse or
/// validate are excluded with a reason rather than dropped silently.
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    pub records: Vec<ExecutionRecord>,
    pub excluded: Vec<Exclusion>,
}

impl Corpus {
    pub fn from_records(records: Vec<ExecutionRecord>) -> Self {
        Corpus {
            records,
            excluded: Vec::new(),
        }
    }

    pub fn load(config: &StoreConfig) -> io::Result<Self> {
        Self::load_dir(&config.incidents_dir())
    }

    /// Loads every record directory directly under `dir`, in name order.
    pub fn load_dir(dir: &Path) -> io::Result<Self> {
        let mut dirs = Vec::new();
        match std::fs::read_dir(dir) {
            Ok(entries) => {
                for entry in entries {
                    let entry = entry?;
                    if entry.file_type()?.is_dir() {
                        dirs.push(entry.path());
                    }
                }
            }
            Err(e) if e.kind() == io::ErrorKind::NotFound => {}
            Err(e) => return Err(e),
        }
        dirs.sort();
        let loaded: Vec<Result<ExecutionRecord, Exclusion>> = dirs
            .par_iter()
            .map(|path| {
                let id = path
                    .file_name()
                    .map(|n| n.to_string_lossy().into_owned())
                    .unwrap_or_default();
                let record = parse_record(path).map_err(|e| Exclusion {
                    investigation_id: id.clone(),
                    reason: e.to_string(),
                })?;
                match validate_record(&record).first() {
                    None => Ok(record),
                    Some(v) => Err(Exclusion {
                        investigation_id: id,
                        reason: format!("{} ({} {})", v.code, v.file, v.locator),
                    }),
                }
            })
            .collect();
        let mut corpus = Corpus::default();
        for item in loaded {
            match item {
                Ok(r) => corpus.records.push(r),
                Err(x) => corpus.excluded.push(x),
            }
        }
        Ok(corpus)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Fraction of records with a plan revision triggered by the step at
/// `trigger_sequence`; `None` for an empty corpus.
pub fn replan_rate(corpus: &Corpus, trigger_sequence: u32) -> Option<f64> {
    if corpus.is_empty() {
        return None;
    }
    let id = step_id_for(trigger_sequence);
    let hits = corpus
        .records
        .iter()
        .filter(|r| r.revision_triggers().any(|t| t == id))
        .count();
    Some(hits as f64 / corpus.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpertLabel {
    pub investigation_id: String,
    pub expert_agrees: bool,
}

/// Reads a JSONL file of [`ExpertLabel`]s.
pub fn read_labels(path: &Path) -> Result<Vec<ExpertLabel>, crate::record::ParseError> {
    Ok(crate::record::read_jsonl(path)?.0)
}

fn label_map(labels: &[ExpertLabel]) -> Result<HashMap<&str, bool>, AnalyticsError> {
    let mut map = HashMap::new();
    for l in labels {
        if map.insert(l.investigation_id.as_str(), l.expert_agrees).is_some() {
            return Err(AnalyticsError::DuplicateLabel(l.investigation_id.clone()));
        }
    }
    Ok(map)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBucket {
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
    /// `None` when the bucket is empty.
    pub agreement_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub buckets: Vec<CalibrationBucket>,
    /// Labeled records with a verdict (the bucket populations' sum).
    pub labeled: usize,
    /// Records with a verdict but no label.
    pub unlabeled: usize,
}

/// Bucket index for `confidence` among `n` equal buckets over [0,1]; the
/// last bucket is closed above.
pub fn bucket_index(confidence: f64, n: usize) -> usize {
    let lo = |i: usize| i as f64 / n as f64;
    let mut i = ((confidence * n as f64).floor().max(0.0) as usize).min(n - 1);
    while i > 0 && confidence < lo(i) {
        i -= 1;
    }
    while i + 1 < n && confidence >= lo(i + 1) {
        i += 1;
    }
    i
}

pub fn confidence_calibration(
    corpus: &Corpus,
    labels: &[ExpertLabel],
    bucket_width: f64,
) -> Result<Calibration, AnalyticsError> {
    let n = (1.0 / bucket_width).round();
    if bucket_width.is_nan() || bucket_width <= 0.0 || n < 1.0 || (n * bucket_width - 1.0).abs() > 1e-9 {
        return Err(AnalyticsError::BucketWidth(bucket_width));
    }
    let n = n as usize;
    let labels = label_map(labels)?;
    let mut counts = vec![(0usize, 0usize); n];
    let mut unlabeled = 0;
    for record in &corpus.records {
        let Some(verdict) = &record.verdict else {
            continue;
        };
        match labels.get(record.id().as_str()) {
            Some(&agrees) => {
                let b = &mut counts[bucket_index(verdict.confidence, n)];
                b.0 += 1;
                b.1 += usize::from(agrees);
            }
            None => unlabeled += 1,
        }
    }
    let buckets: Vec<CalibrationBucket> = counts
        .iter()
        .enumerate()
        .map(|(i, &(total, agree))| CalibrationBucket {
            lo: i as f64 / n as f64,
            hi: (i + 1) as f64 / n as f64,
            n: total,
            agreement_rate: (total > 0).then(|| agree as f64 / total as f64),
        })
        .collect();
    Ok(Calibration {
        labeled: counts.iter().map(|c| c.0).sum(),
        unlabeled,
        buckets,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatternCount {
    pub tool_sequence: Vec<String>,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternReport {
    pub n: usize,
    pub patterns: Vec<PatternCount>,
    pub records_scanned: usize,
    pub skipped_without_verdict: usize,
    pub filtered_out: usize,
}

/// First tool of each evidence-chain step, in chain order. Steps without
/// tool calls contribute no symbol.
pub fn evidence_tools(record: &ExecutionRecord) -> Vec<String> {
    let Some(verdict) = &record.verdict else {
        return Vec::new();
    };
    verdict
        .evidence_chain
        .iter()
        .filter_map(|id| record.step(id))
        .filter_map(|s| s.tool_calls.first())
        .map(|c| c.tool.clone())
        .collect()
}

/// Counts n-grams over evidence-chain tool sequences, most frequent first
/// (ties in lexicographic order).
pub fn mine_evidence_patterns(
    corpus: &Corpus,
    n: usize,
    filter: Option<&dyn Fn(&ExecutionRecord) -> bool>,
) -> Result<PatternReport, AnalyticsError> {
    if n == 0 {
        return Err(AnalyticsError::NgramLength);
    }
    let mut counts: BTreeMap<Vec<String>, usize> = BTreeMap::new();
    let mut report = PatternReport {
        n,
        patterns: Vec::new(),
        records_scanned: 0,
        skipped_without_verdict: 0,
        filtered_out: 0,
    };
    for record in &corpus.records {
        if record.verdict.is_none() {
            report.skipped_without_verdict += 1;
            continue;
        }
        if filter.is_some_and(|f| !f(record)) {
            report.filtered_out += 1;
            continue;
        }
        report.records_scanned += 1;
        for gram in evidence_tools(record).windows(n) {
            *counts.entry(gram.to_vec()).or_default() += 1;
        }
    }
    let mut patterns: Vec<PatternCount> = counts
        .into_iter()
        .map(|(tool_sequence, count)| PatternCount { tool_sequence, count })
        .collect();
    patterns.sort_by(|a, b| b.count.cmp(&a.count).then_with(|| a.tool_sequence.cmp(&b.tool_sequence)));
    report.patterns = patterns;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergenceStats {
    pub reports: usize,
    /// Converged over reports whose verdict was compared.
    pub verdict_convergence_rate: Option<f64>,
    pub step_match_rate: Option<f64>,
    /// New re-plan rate minus original re-plan rate, over annotated steps.
    pub replan_frequency_shift: Option<f64>,
    /// Mean Jaccard of evidence chains, when backends supplied them.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evidence_overlap_mean: Option<f64>,
    /// Mean change in rejected-alternative count, when backends supplied them.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hypothesis_breadth_change_mean: Option<f64>,
}

fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

fn set_jaccard(a: &[String], b: &[String]) -> f64 {
    let x: HashSet<&String> = a.iter().collect();
    let y: HashSet<&String> = b.iter().collect();
    let union = x.union(&y).count();
    if union == 0 {
        1.0
    } else {
        x.intersection(&y).count() as f64 / union as f64
    }
}

pub fn replay_divergence_stats(reports: &[ReplayReport]) -> Result<DivergenceStats, AnalyticsError> {
    if reports.is_empty() {
        return Err(AnalyticsError::NoReports);
    }
    let judged: Vec<&ReplayReport> = reports
        .iter()
        .filter(|r| matches!(r.verdict_outcome, VerdictOutcome::Converged | VerdictOutcome::Diverged))
        .collect();
    let converged = judged
        .iter()
        .filter(|r| r.verdict_outcome == VerdictOutcome::Converged)
        .count();
    let matched: usize = reports.iter().map(|r| r.summary.matched).sum();
    let total: usize = reports.iter().map(|r| r.summary.total).sum();

    let annotated: Vec<_> = reports
        .iter()
        .flat_map(|r| &r.step_comparisons)
        .filter_map(|c| c.new_wants_replan.map(|w| (w, c.original_triggered_replan)))
        .collect();
    let shift = (!annotated.is_empty()).then(|| {
        let new = annotated.iter().filter(|(w, _)| *w).count() as f64;
        let orig = annotated.iter().filter(|(_, o)| *o).count() as f64;
        (new - orig) / annotated.len() as f64
    });

    let overlaps: Vec<f64> = reports
        .iter()
        .filter_map(|r| r.verdict.as_ref())
        .filter_map(|v| {
            v.new_evidence_chain
                .as_ref()
                .map(|new| set_jaccard(&v.original_evidence_chain, new))
        })
        .collect();
    let breadth: Vec<f64> = reports
        .iter()
        .filter_map(|r| r.verdict.as_ref())
        .filter_map(|v| v.new_alternatives.map(|n| n as f64 - v.original_alternatives as f64))
        .collect();

    Ok(DivergenceStats {
        reports: reports.len(),
        verdict_convergence_rate: (!judged.is_empty()).then(|| converged as f64 / judged.len() as f64),
        step_match_rate: (total > 0).then(|| matched as f64 / total as f64),
        replan_frequency_shift: shift,
        evidence_overlap_mean: mean(&overlaps),
        hypothesis_breadth_change_mean: mean(&breadth),
    })
}
