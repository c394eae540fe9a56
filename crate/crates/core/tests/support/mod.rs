//! Fixtures, generators and independent oracles shared by the integration
//! tests and the acceptance harness.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::hash::{DefaultHasher, Hash, Hasher};
use std::path::{Path, PathBuf};

use aer_core::analytics::BenchParams;
use aer_core::codes::Code;
use aer_core::reconcile::{ClaimedCall, FidelityReport, GroundCall, Layer, MatchQuality};
use aer_core::record::{
    step_id_for, AgentIdentity, Authority, ContextSnapshot, Envelope, ExecutionRecord,
    InvestigationId, Metadata, Plan, Principal, PrincipalKind, ProfileTag, RejectedAlternative,
    RetrievalContext, RetrievalSource, Step, Timestamp, TokenUsage, ToolCall, Trigger, Verdict,
};
use rand::seq::SliceRandom;
use rand::Rng;
use serde_json::{json, Value};

pub const GOLDEN_ID: &str = "DBINFRA-1458";

pub fn fixtures_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures")
}

/// Store root holding the golden record under `incidents/`.
pub fn golden_root() -> PathBuf {
    fixtures_dir().join("golden")
}

pub fn golden_dir() -> PathBuf {
    golden_root().join("incidents").join(GOLDEN_ID)
}

pub fn golden_scenario() -> PathBuf {
    fixtures_dir().join("scenarios/dbinfra-1458.json")
}

pub fn scripted_fixture() -> PathBuf {
    fixtures_dir().join("replay/scripted-dbinfra-1458.json")
}

/// Copies a directory tree.
pub fn copy_tree(from: &Path, to: &Path) {
    fs::create_dir_all(to).unwrap();
    for entry in fs::read_dir(from).unwrap() {
        let entry = entry.unwrap();
        let target = to.join(entry.file_name());
        if entry.file_type().unwrap().is_dir() {
            copy_tree(&entry.path(), &target);
        } else {
            fs::copy(entry.path(), target).unwrap();
        }
    }
}

/// Hash over every relative path and file content below `dir`.
pub fn dir_hash(dir: &Path) -> u64 {
    fn walk(base: &Path, dir: &Path, out: &mut Vec<(String, Vec<u8>)>) {
        let Ok(entries) = fs::read_dir(dir) else {
            return;
        };
        for entry in entries {
            let path = entry.unwrap().path();
            let rel = path.strip_prefix(base).unwrap().to_string_lossy().into_owned();
            if path.is_dir() {
                out.push((rel + "/", Vec::new()));
                walk(base, &path, out);
            } else {
                out.push((rel, fs::read(&path).unwrap()));
            }
        }
    }
    let mut items = Vec::new();
    walk(dir, dir, &mut items);
    items.sort();
    let mut h = DefaultHasher::new();
    items.hash(&mut h);
    h.finish()
}

const WORDS: &[&str] = &[
    "listener", "node", "memory", "disk", "latency", "réplica", "ошибка", "timeout", "cpu",
    "pool", "queue", "restart", "エラー", "kernel", "socket", "checkpoint",
];

pub fn words<R: Rng>(rng: &mut R, n: usize) -> String {
    (0..n.max(1))
        .map(|_| *WORDS.choose(rng).unwrap())
        .collect::<Vec<_>>()
        .join(" ")
}

const TOOLS: &[&str] = &[
    "nslookup", "lsnrctl_status", "crsctl_status", "read_syslog", "query_metrics", "df",
];

/// Plan version of each step: non-decreasing from 1, every version used
/// at least once when there are enough steps.
fn plan_assignment<R: Rng>(rng: &mut R, n_steps: usize, n_plans: u32) -> Vec<u32> {
    let mut boundaries: Vec<usize> = (1..n_steps).collect();
    boundaries.shuffle(rng);
    let mut cuts: Vec<usize> = boundaries.into_iter().take(n_plans as usize - 1).collect();
    cuts.sort_unstable();
    (0..n_steps)
        .map(|i| 1 + cuts.iter().filter(|&&c| c <= i).count() as u32)
        .collect()
}

/// A random record that satisfies every schema invariant.
pub fn random_record<R: Rng>(rng: &mut R, id: &str) -> ExecutionRecord {
    let n_steps = rng.gen_range(1..=8usize);
    let n_plans = rng.gen_range(1..=3u32).min(n_steps as u32);
    let versions = plan_assignment(rng, n_steps, n_plans);
    let chain_len = rng.gen_range(1..=4);
    let mut authority_chain: Vec<Principal> = (0..chain_len - 1)
        .map(|i| Principal {
            principal: format!("principal-{i}"),
            kind: *[PrincipalKind::System, PrincipalKind::Team, PrincipalKind::Human]
                .choose(rng)
                .unwrap(),
        })
        .collect();
    authority_chain.push(Principal {
        principal: "rca-agent".into(),
        kind: PrincipalKind::Agent,
    });
    let sources = (0..rng.gen_range(0..3))
        .map(|i| {
            let n = rng.gen_range(0..4u64);
            RetrievalSource {
                kind: "rag".into(),
                query: words(rng, 3),
                chunks_retrieved: n,
                chunk_ids: (0..n).map(|c| format!("chunk-{i}-{c}")).collect(),
                total_tokens: rng.gen_range(0..5000),
            }
        })
        .collect();
    let envelope = Envelope {
        investigation_id: InvestigationId::new(id).unwrap(),
        trigger: Trigger {
            source: "jira-sd".into(),
            reference: id.to_string(),
            summary: words(rng, 5),
            severity: rng.gen_bool(0.5).then(|| "P2".to_string()),
        },
        agent: AgentIdentity {
            agent_version: "rca-v2.4.1".into(),
            model: ["codex-5.3", "codex-6.0"].choose(rng).unwrap().to_string(),
            prompt_version: "rca-prompt-v7.2".into(),
        },
        authority: Authority {
            delegated_by: "oncall:sre".into(),
            delegation_mechanism: "iam-policy:rca-agent-role".into(),
            permissions_scope: vec!["monitoring:read".into()],
            authority_chain,
        },
        context_snapshot: ContextSnapshot {
            retrieval_context: RetrievalContext { sources },
            system_context: BTreeMap::from([("cluster".to_string(), words(rng, 1))]),
        },
        domain_profile: None,
    };
    let steps: Vec<Step> = versions
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let seq = i as u32 + 1;
            Step {
                step_id: step_id_for(seq),
                plan_version: v,
                sequence: seq,
                intent: words(rng, 6),
                tool_calls: (0..rng.gen_range(0..3))
                    .map(|_| ToolCall {
                        tool: TOOLS.choose(rng).unwrap().to_string(),
                        input: if rng.gen_bool(0.5) {
                            Value::String(words(rng, 2))
                        } else {
                            json!({"target": words(rng, 1), "limit": rng.gen_range(1..100)})
                        },
                        output: Value::String(words(rng, 8)),
                        duration_ms: rng.gen_range(1..2000),
                    })
                    .collect(),
                observation: words(rng, 7),
                inference: words(rng, 7),
                tokens: TokenUsage {
                    input: rng.gen_range(100..2000),
                    output: rng.gen_range(50..500),
                },
            }
        })
        .collect();
    let plans: Vec<Plan> = (1..=n_plans)
        .map(|v| {
            let trigger = (v > 1).then(|| {
                let last_before = versions.iter().rposition(|&pv| pv < v).unwrap();
                step_id_for(last_before as u32 + 1)
            });
            Plan {
                plan_version: v,
                supersedes: (v > 1).then(|| v - 1),
                revision_trigger: trigger,
                rationale: words(rng, 8),
                steps_intended: (0..rng.gen_range(1..4)).map(|_| words(rng, 1)).collect(),
            }
        })
        .collect();
    let verdict = rng.gen_bool(0.85).then(|| {
        let mut chain: Vec<String> = steps
            .iter()
            .filter(|_| rng.gen_bool(0.5))
            .map(|s| s.step_id.clone())
            .collect();
        if chain.is_empty() {
            chain.push(steps.last().unwrap().step_id.clone());
        }
        Verdict {
            root_cause_category: ["Infrastructure > Memory > OOM Kill", "Network > DNS", "Application > Pool > Exhaustion"]
                .choose(rng)
                .unwrap()
                .to_string(),
            root_cause_summary: words(rng, 10),
            confidence: rng.gen_range(0.0..=1.0),
            affected_components: vec![words(rng, 1)],
            evidence_chain: chain,
            alternatives_rejected: (0..rng.gen_range(0..3))
                .map(|_| RejectedAlternative {
                    hypothesis: words(rng, 3),
                    rejected_by: steps.choose(rng).unwrap().step_id.clone(),
                    reason: words(rng, 4),
                })
                .collect(),
            remediation: vec![words(rng, 4)],
        }
    });
    let created = rng.gen_range(1_700_000_000_000i64..1_800_000_000_000);
    let duration = rng.gen_range(0..600_000i64);
    let mut metadata = Metadata::new(Timestamp::from_millis(created));
    metadata.completed_at = Some(Timestamp::from_millis(created + duration));
    metadata.duration_ms = Some(duration as u64);
    metadata.cost_usd = Some(rng.gen_range(0.0..1.0));
    ExecutionRecord {
        envelope,
        plans,
        steps,
        verdict,
        metadata: Some(metadata),
        dir_name: Some(id.to_string()),
    }
}

// ---------------------------------------------------------------------------
// reconciler scenarios and oracle

/// Ground-call names chosen pairwise more than two edits apart.
const GROUND_NAMES: &[&str] = &["nslookup", "lsnrctl_status", "read_syslog", "query_metrics", "kubectl"];

/// A name one substitution away from `name`.
fn near_miss(name: &str) -> String {
    let mut chars: Vec<char> = name.chars().collect();
    chars[0] = if chars[0] == 'x' { 'y' } else { 'x' };
    chars.into_iter().collect()
}

#[derive(Debug, Clone)]
pub struct ReconcileScenario {
    pub claims: Vec<ClaimedCall>,
    pub ground: Vec<GroundCall>,
}

/// Ground truth of 0..=7 calls; each is claimed exactly, with a changed
/// input, with a near-miss name, or not at all (hidden). Fabricated claims
/// are sprinkled in between.
pub fn random_reconcile_scenario<R: Rng>(rng: &mut R) -> ReconcileScenario {
    let n = rng.gen_range(0..=7);
    let mut ground = Vec::new();
    let mut claims = Vec::new();
    let mut step = 1;
    for i in 0..n {
        let name = GROUND_NAMES.choose(rng).unwrap().to_string();
        let input = format!("\"arg-{}\"", rng.gen_range(0..3));
        ground.push(GroundCall {
            layer: if rng.gen_bool(0.5) { Layer::Rpc } else { Layer::Shell },
            ts: Timestamp::from_millis(i as i64 * 10),
            name: name.clone(),
            input_canonical: input.clone(),
            server: None,
            method: None,
        });
        if rng.gen_bool(0.2) {
            claims.push(claim(&mut step, &format!("fabricated_{}", rng.gen_range(0..3)), "\"zz\""));
        }
        match rng.gen_range(0..4) {
            0 => claims.push(claim(&mut step, &name, &input)),
            1 => claims.push(claim(&mut step, &name, "\"other\"")),
            2 => claims.push(claim(&mut step, &near_miss(&name), &input)),
            _ => {}
        }
    }
    if rng.gen_bool(0.3) {
        claims.push(claim(&mut step, "fabricated_tail", "\"zz\""));
    }
    ReconcileScenario { claims, ground }
}

fn claim(step: &mut u32, tool: &str, input: &str) -> ClaimedCall {
    let c = ClaimedCall {
        step_id: step_id_for(*step),
        index_in_step: 0,
        tool: tool.to_string(),
        input_canonical: input.to_string(),
        ts_hint: None,
    };
    *step += 1;
    c
}

/// Brute-force longest common subsequence length over names.
pub fn brute_lcs(a: &[&str], b: &[&str]) -> usize {
    match (a.split_first(), b.split_first()) {
        (Some((x, ra)), Some((y, rb))) => {
            if x == y {
                1 + brute_lcs(ra, rb)
            } else {
                brute_lcs(ra, b).max(brute_lcs(a, rb))
            }
        }
        _ => 0,
    }
}

/// Levenshtein distance, textbook full-matrix form.
pub fn oracle_edit_distance(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut d = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for (j, cell) in d[0].iter_mut().enumerate() {
        *cell = j;
    }
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            let sub = d[i - 1][j - 1] + usize::from(a[i - 1] != b[j - 1]);
            d[i][j] = sub.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    d[a.len()][b.len()]
}

/// Independent evaluation of the fidelity formula for a set of index pairs:
/// 2·Σw / (|claims| + |ground|), each pair weighted by its own comparison.
pub fn oracle_score(claims: &[ClaimedCall], ground: &[GroundCall], pairs: &[(usize, usize)]) -> f64 {
    let total = claims.len() + ground.len();
    if total == 0 {
        return 1.0;
    }
    let mut w = 0.0;
    for &(c, g) in pairs {
        let (c, g) = (&claims[c], &ground[g]);
        w += if c.tool != g.name {
            0.25
        } else if c.input_canonical == g.input_canonical {
            1.0
        } else {
            0.5
        };
    }
    2.0 * w / total as f64
}

pub fn oracle_quality(c: &ClaimedCall, g: &GroundCall) -> MatchQuality {
    if c.tool != g.name {
        MatchQuality::NameDivergent
    } else if c.input_canonical == g.input_canonical {
        MatchQuality::Exact
    } else {
        MatchQuality::InputDivergent
    }
}

// ---------------------------------------------------------------------------
// analytics oracles

/// Fraction of all records in which some plan names step `seq` as its
/// revision trigger.
pub fn oracle_replan_rate(records: &[ExecutionRecord], seq: u32) -> Option<f64> {
    if records.is_empty() {
        return None;
    }
    let target = step_id_for(seq);
    let mut hits = 0usize;
    for r in records {
        for p in &r.plans {
            if p.revision_trigger.as_deref() == Some(target.as_str()) {
                hits += 1;
                break;
            }
        }
    }
    Some(hits as f64 / records.len() as f64)
}

/// (n, agreements) per bucket of width 1/buckets, last bucket closed.
pub fn oracle_calibration(
    records: &[ExecutionRecord],
    labels: &HashMap<String, bool>,
    buckets: usize,
) -> Vec<(usize, usize)> {
    let mut out = vec![(0, 0); buckets];
    for r in records {
        let Some(v) = &r.verdict else { continue };
        let Some(&agrees) = labels.get(r.id().as_str()) else { continue };
        let mut idx = buckets - 1;
        for b in 0..buckets {
            let hi = (b + 1) as f64 / buckets as f64;
            if v.confidence < hi && b + 1 < buckets {
                idx = b;
                break;
            }
        }
        out[idx].0 += 1;
        out[idx].1 += usize::from(agrees);
    }
    out
}

/// n-gram counts over the first tool of each evidence step that has tools.
pub fn oracle_patterns(records: &[ExecutionRecord], n: usize) -> BTreeMap<Vec<String>, usize> {
    let mut counts = BTreeMap::new();
    for r in records {
        let Some(v) = &r.verdict else { continue };
        let seq: Vec<String> = v
            .evidence_chain
            .iter()
            .filter_map(|id| r.steps.iter().find(|s| &s.step_id == id))
            .filter_map(|s| s.tool_calls.first().map(|c| c.tool.clone()))
            .collect();
        if seq.len() < n {
            continue;
        }
        for start in 0..=seq.len() - n {
            *counts.entry(seq[start..start + n].to_vec()).or_insert(0) += 1;
        }
    }
    counts
}

// ---------------------------------------------------------------------------
// retention oracle

pub struct EvictCase {
    pub id: String,
    pub age_days: f64,
    pub pinned: bool,
    pub promoted: bool,
}

/// Ids an age-then-count policy removes.
pub fn oracle_evict(cases: &[EvictCase], max_age_days: f64, max_unpinned: usize) -> BTreeSet<String> {
    let mut removed = BTreeSet::new();
    let mut survivors: Vec<&EvictCase> = Vec::new();
    for c in cases.iter().filter(|c| !c.pinned && !c.promoted) {
        if c.age_days > max_age_days {
            removed.insert(c.id.clone());
        } else {
            survivors.push(c);
        }
    }
    survivors.sort_by(|a, b| b.age_days.partial_cmp(&a.age_days).unwrap().then(a.id.cmp(&b.id)));
    let excess = survivors.len().saturating_sub(max_unpinned);
    for c in survivors.into_iter().take(excess) {
        removed.insert(c.id.clone());
    }
    removed
}

pub type Mutation = fn(&mut ExecutionRecord);

fn extra_step(r: &mut ExecutionRecord, id: &str, sequence: u32, plan_version: u32) {
    let mut step = r.steps[3].clone();
    step.step_id = id.to_string();
    step.sequence = sequence;
    step.plan_version = plan_version;
    r.steps.push(step);
}

fn fidelity(score: f64) -> FidelityReport {
    FidelityReport {
        score,
        mcp_coverage: 1.0,
        shell_coverage: 1.0,
        tool_match_rate: 1.0,
        fabrication_rate: 0.0,
        hidden_call_rate: 0.0,
        claims_total: 0,
        ground_total: 0,
        pairs: vec![],
        fabricated: vec![],
        hidden: vec![],
        noise_filtered: 0,
        ground_truth_absent: false,
        fs_context: vec![],
    }
}

/// One single-fault mutation of the golden record per invariant, paired
/// with the only code it may produce.
pub fn mutations() -> Vec<(Code, Mutation)> {
    vec![
        (Code::InvestigationIdInvalid, |r| {
            r.envelope.investigation_id = InvestigationId::new_unchecked("bad id/1");
        }),
        (Code::InvestigationIdDirMismatch, |r| r.dir_name = Some("DBINFRA-9999".into())),
        (Code::TriggerFieldEmpty, |r| r.envelope.trigger.source = " ".into()),
        (Code::AgentFieldEmpty, |r| r.envelope.agent.model = String::new()),
        (Code::AuthorityChainEmpty, |r| r.envelope.authority.authority_chain.clear()),
        (Code::AuthorityChainTailNotAgent, |r| {
            r.envelope.authority.authority_chain.last_mut().unwrap().kind = PrincipalKind::Human;
        }),
        (Code::RetrievalChunkCountMismatch, |r| {
            r.envelope.context_snapshot.retrieval_context.sources[0].chunks_retrieved = 4;
        }),
        (Code::ProfileExtensionKeyInvalid, |r| {
            r.envelope.domain_profile = Some(ProfileTag {
                profile_id: "dbinfra".into(),
                profile_version: "1".into(),
                extensions: [("cluster".to_string(), json!("rac"))].into(),
            });
        }),
        (Code::PlanVersionNoncontiguous, |r| {
            r.plans.push(Plan {
                plan_version: 4,
                supersedes: Some(3),
                revision_trigger: Some("step_004".into()),
                rationale: "x".into(),
                steps_intended: vec![],
            });
        }),
        (Code::PlanV1HasRevision, |r| r.plans[0].supersedes = Some(0)),
        (Code::PlanSupersedesMismatch, |r| r.plans[1].supersedes = Some(7)),
        (Code::RevisionTriggerMissing, |r| r.plans[1].revision_trigger = None),
        (Code::RevisionTriggerUnknown, |r| r.plans[1].revision_trigger = Some("step_099".into())),
        (Code::RevisionTriggerOrder, |r| r.plans[1].revision_trigger = Some("step_003".into())),
        (Code::StepIdInvalid, |r| extra_step(r, "step5", 5, 2)),
        (Code::StepIdDuplicate, |r| extra_step(r, "step_004", 5, 2)),
        (Code::StepIdSequenceMismatch, |r| extra_step(r, "step_006", 5, 2)),
        (Code::StepSequenceGap, |r| extra_step(r, "step_006", 6, 2)),
        (Code::StepPlanUnknown, |r| extra_step(r, "step_005", 5, 3)),
        (Code::StepIntentEmpty, |r| r.steps[0].intent = String::new()),
        (Code::StepObservationEmpty, |r| r.steps[1].observation = "\t".into()),
        (Code::StepInferenceEmpty, |r| r.steps[2].inference = String::new()),
        (Code::ToolNameEmpty, |r| r.steps[0].tool_calls[0].tool = String::new()),
        (Code::EvidenceEmpty, |r| r.verdict.as_mut().unwrap().evidence_chain.clear()),
        (Code::EvidenceDanglingStep, |r| {
            r.verdict.as_mut().unwrap().evidence_chain.push("step_009".into());
        }),
        (Code::EvidenceOrder, |r| r.verdict.as_mut().unwrap().evidence_chain.swap(1, 2)),
        (Code::EvidenceDuplicate, |r| {
            r.verdict.as_mut().unwrap().evidence_chain.push("step_004".into());
        }),
        (Code::RejectedByUnknown, |r| {
            r.verdict.as_mut().unwrap().alternatives_rejected.push(RejectedAlternative {
                hypothesis: "disk full".into(),
                rejected_by: "step_042".into(),
                reason: "x".into(),
            });
        }),
        (Code::ConfidenceOutOfRange, |r| r.verdict.as_mut().unwrap().confidence = 1.5),
        (Code::MetadataMissing, |r| r.metadata = None),
        (Code::SchemaVersionUnknown, |r| r.metadata.as_mut().unwrap().schema_version = "9.0.0".into()),
        (Code::MetadataTimestampOrder, |r| {
            let m = r.metadata.as_mut().unwrap();
            m.completed_at = Some(Timestamp::from_millis(m.created_at.millis() - 1));
        }),
        (Code::CostNegative, |r| r.metadata.as_mut().unwrap().cost_usd = Some(-0.01)),
        (Code::FidelityOutOfRange, |r| r.metadata.as_mut().unwrap().fidelity = Some(fidelity(1.5))),
    ]
}

/// Serialized size of the checkpoint history, counted from the message
/// shape rather than by serializing.
pub fn oracle_checkpoint_total(p: &BenchParams, k: usize) -> u64 {
    let msg = |role: &str, content: usize| (r#"{"content":"","role":""}"#.len() + role.len() + content) as u64;
    let mut total = 0;
    for j in 1..=k as u64 {
        let messages = 1 + 2 * j;
        let body = msg("user", p.user_prompt_bytes) + j * (msg("assistant", p.assistant_bytes) + msg("tool", p.tool_bytes));
        total += 2 + (messages - 1) + body + p.checkpoint_overhead_bytes as u64;
    }
    total
}
