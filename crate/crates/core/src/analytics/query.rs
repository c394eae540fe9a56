//! Generic filter/extract/aggregate queries over record documents.
//!
//! A query is a JSON object:
//!
//! ```json
//! {"where": {"and": [{"field": "derived.replanned", "op": "eq", "value": true},
//!                    {"field": "verdict.confidence", "op": "lt", "value": 0.7}]},
//!  "select": "steps.*.tool_calls.*.tool",
//!  "agg": "histogram",
//!  "group_by": "envelope.agent.model"}
//! ```
//!
//! Paths are dotted with `*` matching every array element or object value
//! and numeric segments indexing arrays. A comparison holds when any value
//! at its path satisfies it. Each record is presented as
//! `{"envelope","plans","steps","verdict","metadata","derived"}`, plus
//! `"label"` when expert labels are supplied.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use super::{AnalyticsError, Corpus};
use crate::record::canonical::canonical_text;
use crate::record::{record_to_json, ExecutionRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Op {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
    /// Substring of a string, or element of an array.
    Contains,
    /// The value equals one of the elements of an array operand.
    In,
    Exists,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Predicate {
    And {
        and: Vec<Predicate>,
    },
    Or {
        or: Vec<Predicate>,
    },
    Not {
        not: Box<Predicate>,
    },
    Compare {
        field: String,
        op: Op,
        #[serde(default)]
        value: Value,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Agg {
    #[default]
    Count,
    Sum,
    Mean,
    Min,
    Max,
    Values,
    Histogram,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Query {
    #[serde(default, rename = "where")]
    pub filter: Option<Predicate>,
    #[serde(default)]
    pub select: Option<String>,
    #[serde(default)]
    pub agg: Agg,
    #[serde(default)]
    pub group_by: Option<String>,
}

impl Query {
    pub fn parse(text: &str) -> Result<Self, AnalyticsError> {
        serde_json::from_str(text).map_err(|e| AnalyticsError::Query(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub total: usize,
    pub matched: usize,
    pub value: Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub groups: Option<BTreeMap<String, Value>>,
}

/// Computed fields offered to queries under `derived`.
pub fn derived_fields(record: &ExecutionRecord) -> Value {
    let mut tools: Vec<&str> = record
        .steps
        .iter()
        .flat_map(|s| s.tool_calls.iter().map(|c| c.tool.as_str()))
        .collect();
    tools.sort_unstable();
    tools.dedup();
    json!({
        "step_count": record.steps.len(),
        "plan_count": record.plans.len(),
        "replanned": record.plans.len() > 1,
        "tool_call_count": record.steps.iter().map(|s| s.tool_calls.len()).sum::<usize>(),
        "tools": tools,
        "has_verdict": record.verdict.is_some(),
        "evidence_length": record.verdict.as_ref().map_or(0, |v| v.evidence_chain.len()),
        "category_levels": record.verdict.as_ref().map(|v| v.category_levels()),
        "fidelity_score": record.metadata.as_ref().and_then(|m| m.fidelity.as_ref()).map(|f| f.score),
        "tokens_total": record.steps.iter().map(|s| s.tokens.input + s.tokens.output).sum::<u64>(),
    })
}

pub fn record_document(record: &ExecutionRecord, expert_agrees: Option<bool>) -> Value {
    let mut doc = record_to_json(record);
    if let Value::Object(map) = &mut doc {
        map.insert("derived".into(), derived_fields(record));
        if let Some(agrees) = expert_agrees {
            map.insert("label".into(), json!({"expert_agrees": agrees}));
        }
    }
    doc
}

/// Every value at `path`.
pub fn resolve_path<'v>(root: &'v Value, path: &str) -> Vec<&'v Value> {
    let mut current = vec![root];
    for segment in path.split('.').filter(|s| !s.is_empty()) {
        let mut next = Vec::new();
        for v in current {
            match v {
                Value::Array(items) if segment == "*" => next.extend(items.iter()),
                Value::Object(map) if segment == "*" => next.extend(map.values()),
                Value::Array(items) => {
                    if let Some(item) = segment.parse::<usize>().ok().and_then(|i| items.get(i)) {
                        next.push(item);
                    }
                }
                Value::Object(map) => {
                    if let Some(item) = map.get(segment) {
                        next.push(item);
                    }
                }
                _ => {}
            }
        }
        current = next;
    }
    current
}

fn order(a: &Value, b: &Value) -> Option<Ordering> {
    match (a, b) {
        (Value::Number(x), Value::Number(y)) => x.as_f64()?.partial_cmp(&y.as_f64()?),
        (Value::String(x), Value::String(y)) => Some(x.cmp(y)),
        (Value::Bool(x), Value::Bool(y)) => Some(x.cmp(y)),
        _ => None,
    }
}

fn equal(a: &Value, b: &Value) -> bool {
    order(a, b) == Some(Ordering::Equal) || a == b
}

fn compare(v: &Value, op: Op, target: &Value) -> bool {
    match op {
        Op::Eq => equal(v, target),
        Op::Ne => !equal(v, target),
        Op::Lt => order(v, target) == Some(Ordering::Less),
        Op::Le => matches!(order(v, target), Some(Ordering::Less | Ordering::Equal)),
        Op::Gt => order(v, target) == Some(Ordering::Greater),
        Op::Ge => matches!(order(v, target), Some(Ordering::Greater | Ordering::Equal)),
        Op::Contains => match (v, target) {
            (Value::String(s), Value::String(t)) => s.contains(t.as_str()),
            (Value::Array(items), t) => items.iter().any(|i| equal(i, t)),
            _ => false,
        },
        Op::In => target.as_array().is_some_and(|items| items.iter().any(|i| equal(v, i))),
        Op::Exists => !v.is_null(),
    }
}

pub fn eval_predicate(doc: &Value, predicate: &Predicate) -> bool {
    match predicate {
        Predicate::And { and } => and.iter().all(|p| eval_predicate(doc, p)),
        Predicate::Or { or } => or.iter().any(|p| eval_predicate(doc, p)),
        Predicate::Not { not } => !eval_predicate(doc, not),
        Predicate::Compare { field, op, value } => {
            resolve_path(doc, field).into_iter().any(|v| compare(v, *op, value))
        }
    }
}

fn aggregate(agg: Agg, matched: usize, selected: Option<Vec<Value>>) -> Value {
    let Some(values) = selected else {
        return json!(matched);
    };
    let numbers: Vec<f64> = values.iter().filter_map(Value::as_f64).collect();
    match agg {
        Agg::Count => json!(values.len()),
        Agg::Sum => json!(numbers.iter().sum::<f64>()),
        Agg::Mean if numbers.is_empty() => Value::Null,
        Agg::Mean => json!(numbers.iter().sum::<f64>() / numbers.len() as f64),
        Agg::Min => numbers.iter().copied().reduce(f64::min).map_or(Value::Null, |x| json!(x)),
        Agg::Max => numbers.iter().copied().reduce(f64::max).map_or(Value::Null, |x| json!(x)),
        Agg::Values => Value::Array(values),
        Agg::Histogram => {
            let mut counts: BTreeMap<String, usize> = BTreeMap::new();
            for v in &values {
                let key = v.as_str().map(str::to_string).unwrap_or_else(|| canonical_text(v));
                *counts.entry(key).or_default() += 1;
            }
            Value::Object(counts.into_iter().map(|(k, n)| (k, json!(n))).collect::<Map<_, _>>())
        }
    }
}

/// Runs `query` over the corpus; `labels` adds a `label` member per record.
pub fn run_query(corpus: &Corpus, query: &Query, labels: Option<&HashMap<String, bool>>) -> QueryResult {
    let mut matched = 0;
    let mut all: Vec<Value> = Vec::new();
    let mut groups: BTreeMap<String, (usize, Vec<Value>)> = BTreeMap::new();
    for record in &corpus.records {
        let label = labels.and_then(|l| l.get(record.id().as_str()).copied());
        let doc = record_document(record, label);
        if !query.filter.as_ref().is_none_or(|p| eval_predicate(&doc, p)) {
            continue;
        }
        matched += 1;
        let selected: Vec<Value> = query
            .select
            .as_deref()
            .map(|path| resolve_path(&doc, path).into_iter().cloned().collect())
            .unwrap_or_default();
        if let Some(group_path) = &query.group_by {
            let key = resolve_path(&doc, group_path)
                .first()
                .map(|v| v.as_str().map(str::to_string).unwrap_or_else(|| canonical_text(v)))
                .unwrap_or_else(|| "null".to_string());
            let g = groups.entry(key).or_default();
            g.0 += 1;
            g.1.extend(selected.iter().cloned());
        }
        all.extend(selected);
    }
    let has_select = query.select.is_some();
    QueryResult {
        total: corpus.records.len(),
        matched,
        value: aggregate(query.agg, matched, has_select.then_some(all)),
        groups: query.group_by.as_ref().map(|_| {
            groups
                .into_iter()
                .map(|(k, (n, vals))| (k, aggregate(query.agg, n, has_select.then_some(vals))))
                .collect()
        }),
    }
}
