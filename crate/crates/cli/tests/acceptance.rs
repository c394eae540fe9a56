//! Acceptance harness: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails.

#[path = "../../core/tests/support/mod.rs"]
mod support;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use aer_core::analytics::{
    confidence_calibration, fit_exponent, mine_evidence_patterns, replan_rate, storage_bench,
    BenchParams, Corpus, ExpertLabel, StorageBenchResult,
};
use aer_core::reconcile::{
    align, score_fidelity, AlignOptions, ClaimedCall, GroundCall, Layer, MatchQuality,
};
use aer_core::record::canonical::canonical_text;
use aer_core::record::{
    parse_record, validate_record, write_record, ExecutionRecord, Timestamp, ENVELOPE_FILE,
    METADATA_FILE, PLANS_FILE, STEPS_FILE, VERDICT_FILE,
};
use aer_core::replay::{
    render_report, EchoBackend, JaccardComparator, Replayer, ScriptedBackend, StepOutcome,
    VerdictOutcome,
};
use aer_core::store::{evict, list_records, StoreConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use serde_json::{json, Value};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        let held: bool = $cond;
        if !held {
            return Err(format!($($msg)+));
        }
    };
}

fn golden() -> ExecutionRecord {
    parse_record(&support::golden_dir()).expect("golden record parses")
}

fn golden_round_trip() -> Outcome {
    let start = Instant::now();
    let record = parse_record(&support::golden_dir()).map_err(|e| e.to_string())?;
    let violations = validate_record(&record);
    ensure!(violations.is_empty(), "{} violations: {violations:?}", violations.len());
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let out = tmp.path().join(support::GOLDEN_ID);
    write_record(&out, &record).map_err(|e| e.to_string())?;
    for file in [ENVELOPE_FILE, PLANS_FILE, STEPS_FILE, VERDICT_FILE, METADATA_FILE] {
        let want = fs::read(support::golden_dir().join(file)).map_err(|e| e.to_string())?;
        let got = fs::read(out.join(file)).map_err(|e| e.to_string())?;
        ensure!(got == want, "{file} differs after re-serialization");
    }
    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(1), "took {elapsed:?}");
    Ok(format!("5 files byte-identical, 0 violations, {} ms", elapsed.as_millis()))
}

fn mutation_suite() -> Outcome {
    let cases = support::mutations();
    ensure!(cases.len() >= 15, "only {} invariants covered", cases.len());
    for (code, mutate) in &cases {
        let mut r = golden();
        mutate(&mut r);
        let got: Vec<_> = validate_record(&r).iter().map(|v| v.code).collect();
        ensure!(got == vec![*code], "fault for {code} produced {got:?}");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0xacce);
    for i in 0..1000 {
        let r = support::random_record(&mut rng, &format!("PROP-{i}"));
        let v = validate_record(&r);
        ensure!(v.is_empty(), "random record {i} has violations {v:?}");
    }
    Ok(format!("{} single-fault fixtures exact, 1000 random records clean", cases.len()))
}

const PROXY_MESSAGES: usize = 10_000;
const MIN_SIZE: f64 = 10.0;
const MAX_SIZE: f64 = 1_000_000.0;

/// One JSON-RPC line of exactly `target` bytes (without the newline), or
/// the smallest well-formed message when `target` is below that.
fn rpc_message<R: Rng>(rng: &mut R, id: usize, target: usize) -> String {
    const ALPHABET: &[char] = &['a', 'b', 'x', 'z', '0', '9', ' ', '"', '\\', 'é', '日', '\t'];
    let notification = rng.gen_bool(0.1);
    let line = |p: &str| {
        if notification {
            json!({"jsonrpc": "2.0", "method": "notifications/progress", "params": {"p": p}})
        } else {
            json!({"jsonrpc": "2.0", "id": id, "method": "tools/call", "params": {"name": "t", "arguments": {"p": p}}})
        }
        .to_string()
    };
    if target < line("").len() {
        return if notification {
            r#"{"method":"n"}"#.to_string()
        } else {
            format!(r#"{{"id":{id},"method":"m"}}"#)
        };
    }
    // a sprinkle of escapes and multi-byte text, topped up with ASCII
    let mut p: String = (0..target / 16).map(|_| ALPHABET[rng.gen_range(0..ALPHABET.len())]).collect();
    let mut len = line(&p).len();
    while len > target {
        p.pop();
        len = line(&p).len();
    }
    p.extend(std::iter::repeat_n('q', target - len));
    line(&p)
}

#[derive(Deserialize)]
struct LoggedMessage {
    direction: String,
    #[serde(default)]
    id: Option<Value>,
}

fn files_equal(a: &Path, b: &Path) -> std::io::Result<bool> {
    let (mut fa, mut fb) = (BufReader::new(File::open(a)?), BufReader::new(File::open(b)?));
    let (mut ba, mut bb) = (vec![0u8; 1 << 16], vec![0u8; 1 << 16]);
    loop {
        let na = fa.read(&mut ba)?;
        if na == 0 {
            return Ok(fb.read(&mut bb)? == 0);
        }
        fb.read_exact(&mut bb[..na]).map_err(|_| std::io::ErrorKind::UnexpectedEof)?;
        if ba[..na] != bb[..na] {
            return Ok(false);
        }
    }
}

fn proxy_transparency() -> Outcome {
    let bin = env!("CARGO_BIN_EXE_aer");
    let start = Instant::now();
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let input = tmp.path().join("input.jsonl");
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut sizes = Vec::with_capacity(PROXY_MESSAGES);
    let mut requests = 0;
    {
        let mut w = BufWriter::new(File::create(&input).map_err(|e| e.to_string())?);
        let (lo, hi) = (MIN_SIZE.ln(), MAX_SIZE.ln());
        for i in 0..PROXY_MESSAGES {
            let target = rng.gen_range(lo..hi).exp() as usize;
            let line = rpc_message(&mut rng, i, target);
            if line.contains("\"id\"") {
                requests += 1;
            }
            sizes.push(line.len());
            writeln!(w, "{line}").map_err(|e| e.to_string())?;
        }
        w.flush().map_err(|e| e.to_string())?;
    }
    let run = |args: &[&str], out: &Path| -> Result<Option<i32>, String> {
        let status = Command::new(bin)
            .args(args)
            .stdin(File::open(&input).map_err(|e| e.to_string())?)
            .stdout(File::create(out).map_err(|e| e.to_string())?)
            .status()
            .map_err(|e| e.to_string())?;
        Ok(status.code())
    };
    let log = tmp.path().join("rpc-accept.jsonl");
    let (proxied, direct) = (tmp.path().join("proxied.out"), tmp.path().join("direct.out"));
    let log_arg = log.to_str().unwrap();
    let generated = start.elapsed();
    let proxied_code = run(
        &["intercept", "rpc", "--name", "accept", "--log", log_arg, "--", bin, "intercept", "rpc-echo", "--exit-code", "7"],
        &proxied,
    )?;
    let proxied_time = start.elapsed() - generated;
    let direct_code = run(&["intercept", "rpc-echo", "--exit-code", "7"], &direct)?;
    ensure!(proxied_code == Some(7), "proxied exit {proxied_code:?}");
    ensure!(direct_code == Some(7), "direct exit {direct_code:?}");
    ensure!(files_equal(&proxied, &direct).map_err(|e| e.to_string())?, "caller-visible output differs");

    let mut seen = HashSet::new();
    let (mut logged_requests, mut responses, mut notifications) = (0, 0, 0);
    for line in BufReader::new(File::open(&log).map_err(|e| e.to_string())?).lines() {
        let line = line.map_err(|e| e.to_string())?;
        let m: LoggedMessage = serde_json::from_str(&line).map_err(|e| e.to_string())?;
        let key = m.id.as_ref().map(canonical_text);
        match m.direction.as_str() {
            "request" => {
                logged_requests += 1;
                ensure!(seen.insert(key.clone()), "duplicate request id {key:?}");
            }
            "response" => {
                responses += 1;
                ensure!(seen.contains(&key), "response {key:?} has no earlier request");
            }
            "notification" => notifications += 1,
            other => return Err(format!("unexpected {other} entry")),
        }
    }
    ensure!(logged_requests == requests, "logged {logged_requests} of {requests} requests");
    ensure!(responses == requests, "{responses} responses for {requests} requests");
    ensure!(logged_requests + notifications == PROXY_MESSAGES, "log lost messages");
    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(60), "took {elapsed:?}");
    sizes.sort_unstable();
    let total: usize = sizes.iter().sum();
    Ok(format!(
        "{PROXY_MESSAGES} messages ({} MB, sizes {}..{} B, median {}), {responses} responses paired, exit 7 preserved; proxied run {:.1} s of {:.1} s",
        total / 1_000_000,
        sizes[0],
        sizes[sizes.len() - 1],
        sizes[sizes.len() / 2],
        proxied_time.as_secs_f64(),
        elapsed.as_secs_f64()
    ))
}

fn reconciler_oracles() -> Outcome {
    let opts = AlignOptions::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0x4ec0);
    let mut seen = [0usize; 3];
    let (mut fabricated, mut hidden) = (0, 0);
    let score_of = |c: &[ClaimedCall], g: &[GroundCall]| score_fidelity(&align(c, g, &opts), c, g).score;
    for case in 0..600 {
        let s = support::random_reconcile_scenario(&mut rng);
        let alignment = align(&s.claims, &s.ground, &opts);
        let pairs: Vec<(usize, usize)> = alignment
            .pairs
            .iter()
            .map(|p| {
                let c = s.claims.iter().position(|c| c.step_id == p.claimed.step_id).unwrap();
                let g = s.ground.iter().position(|g| g.ts == p.ground.ts).unwrap();
                (c, g)
            })
            .collect();
        for (p, &(c, g)) in alignment.pairs.iter().zip(&pairs) {
            let expected = support::oracle_quality(&s.claims[c], &s.ground[g]);
            ensure!(p.quality == expected, "case {case}: quality {:?} vs {expected:?}", p.quality);
            seen[p.quality as usize] += 1;
        }
        fabricated += alignment.fabricated.len();
        hidden += alignment.hidden.len();
        let got = score_fidelity(&alignment, &s.claims, &s.ground).score;
        let want = support::oracle_score(&s.claims, &s.ground, &pairs);
        ensure!((got - want).abs() <= 1e-12, "case {case}: score {got} vs oracle {want}");

        let mut claims = s.claims.clone();
        claims.insert(
            rng.gen_range(0..=claims.len()),
            ClaimedCall {
                step_id: "step_999".into(),
                index_in_step: 0,
                tool: "invented_tool".into(),
                input_canonical: "\"q\"".into(),
                ts_hint: None,
            },
        );
        ensure!(score_of(&claims, &s.ground) <= got + 1e-15, "case {case}: fabricated call raised the score");
        let mut ground = s.ground.clone();
        ground.insert(
            rng.gen_range(0..=ground.len()),
            GroundCall {
                layer: Layer::Shell,
                ts: Timestamp::from_millis(-1),
                name: "strace".into(),
                input_canonical: "\"-p 1\"".into(),
                server: None,
                method: None,
            },
        );
        ensure!(score_of(&s.claims, &ground) <= got + 1e-15, "case {case}: hidden call raised the score");
    }
    ensure!(seen.iter().all(|&n| n > 0) && fabricated > 0 && hidden > 0, "scenario mix {seen:?}");

    let claim = [ClaimedCall {
        step_id: "step_001".into(),
        index_in_step: 0,
        tool: "search".into(),
        input_canonical: canonical_text(&json!({"region": "Montreal"})),
        ts_hint: None,
    }];
    let truth = [GroundCall {
        layer: Layer::Rpc,
        ts: Timestamp::from_millis(0),
        name: "search".into(),
        input_canonical: canonical_text(&json!({"region": "Ashburn"})),
        server: None,
        method: None,
    }];
    let a = align(&claim, &truth, &opts);
    ensure!(
        a.pairs.len() == 1 && a.pairs[0].quality == MatchQuality::InputDivergent,
        "Montreal/Ashburn not input-divergent"
    );
    Ok(format!(
        "600 scenarios within 1e-12 (exact {}, input-divergent {}, name-divergent {}, fabricated {fabricated}, hidden {hidden}), 1200 perturbations monotone, Montreal/Ashburn input-divergent",
        seen[0], seen[1], seen[2]
    ))
}

fn mock_replay_report() -> Outcome {
    let record = golden();
    let backend = ScriptedBackend::from_file(&support::scripted_fixture()).map_err(|e| e.to_string())?;
    let comparator = JaccardComparator::default();
    let report = Replayer::new(&backend, &comparator).mock(&record).map_err(|e| e.to_string())?;
    let divergent: Vec<&str> = report
        .step_comparisons
        .iter()
        .filter(|c| c.outcome != StepOutcome::Equivalent)
        .map(|c| c.step_id.as_str())
        .collect();
    ensure!(divergent == ["step_002"], "divergent steps {divergent:?}");
    ensure!(report.step_comparisons[1].note.contains("skips re-plan"), "step_002 note: {}", report.step_comparisons[1].note);
    ensure!((report.summary.matched, report.summary.total) == (3, 4), "summary {:?}", report.summary);
    ensure!(report.verdict_outcome == VerdictOutcome::Converged, "verdict {:?}", report.verdict_outcome);
    let v = report.verdict.as_ref().ok_or("no verdict comparison")?;
    let new_conf = v.new_confidence.ok_or("no new confidence")?;
    ensure!((v.original_confidence - new_conf).abs() <= 0.15, "confidence {} vs {new_conf}", v.original_confidence);
    let depth2 = |c: &str| c.split(" > ").take(2).map(str::to_lowercase).collect::<Vec<_>>();
    ensure!(
        depth2(&v.original_category) == depth2(v.new_category.as_deref().unwrap_or("")),
        "categories differ at depth 2"
    );
    let text = render_report(&report);
    ensure!(text.trim_end().ends_with("Summary: 3/4 matched. Verdict converged."), "summary line: {text}");

    let mut rng = ChaCha8Rng::seed_from_u64(0xec40);
    let mut corpus: Vec<ExecutionRecord> =
        (0..200).map(|i| support::random_record(&mut rng, &format!("ECHO-{i}"))).collect();
    corpus.push(golden());
    let echo = EchoBackend::from_records(&corpus);
    let replayer = Replayer::new(&echo, &comparator);
    for r in &corpus {
        let rep = replayer.mock(r).map_err(|e| e.to_string())?;
        ensure!(rep.summary.matched == r.steps.len(), "{}: echo replay diverged", r.id());
        let want = if r.verdict.is_some() { VerdictOutcome::Converged } else { VerdictOutcome::Absent };
        ensure!(rep.verdict_outcome == want, "{}: echo verdict {:?}", r.id(), rep.verdict_outcome);
    }
    Ok(format!(
        "one divergence at step_002 (skipped re-plan), 3/4 matched, verdict converged ({} vs {new_conf}); echo fixed point over {} records",
        v.original_confidence,
        corpus.len()
    ))
}

fn storage_benchmark() -> Outcome {
    let p = BenchParams::default();
    let r = storage_bench(&p, 10);
    let want = support::oracle_checkpoint_total(&p, 10);
    ensure!(r.checkpoint_total_bytes == want, "checkpoint {} vs closed form {want}", r.checkpoint_total_bytes);
    let kb = |b: u64| b as f64 / 1000.0;
    let checkpoint = kb(r.checkpoint_total_bytes);
    let record = kb(r.aer_bytes_with_raw);
    ensure!((checkpoint - 560.0).abs() <= 112.0, "checkpoint {checkpoint} KB");
    ensure!((25.0..=130.0).contains(&record), "record {record} KB");
    ensure!((4.0..=22.0).contains(&r.ratio), "ratio {}", r.ratio);
    let runs: Vec<_> = [5usize, 10, 20, 40].iter().map(|&k| storage_bench(&p, k)).collect();
    let fit = |f: &dyn Fn(&StorageBenchResult) -> u64| {
        fit_exponent(&runs.iter().map(|r| (r.steps as f64, f(r) as f64)).collect::<Vec<_>>())
    };
    let ce = fit(&|r| r.checkpoint_total_bytes);
    let ae = fit(&|r| r.aer_bytes_with_raw);
    ensure!((ce - 2.0).abs() <= 0.15, "checkpoint exponent {ce}");
    ensure!((ae - 1.0).abs() <= 0.15, "record exponent {ae}");
    Ok(format!(
        "K=10 checkpoint {checkpoint:.1} KB, record {record:.1} KB, ratio {:.2}; exponents {ce:.3} and {ae:.3}",
        r.ratio
    ))
}

const DAY_MS: i64 = 86_400_000;
const NOW_MS: i64 = 1_780_000_000_000;

fn lifecycle_policy() -> Outcome {
    let mut removed_total = 0;
    for seed in 0..30u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
        let mut config = StoreConfig::new(tmp.path());
        config.max_age_days = rng.gen_range(1..30);
        config.max_unpinned = rng.gen_range(0..40);
        let mut cases = Vec::new();
        for i in 0..rng.gen_range(0..=200) {
            let case = support::EvictCase {
                id: format!("EV-{i:03}"),
                age_days: rng.gen_range(0..60 * DAY_MS) as f64 / DAY_MS as f64,
                pinned: rng.gen_bool(0.15),
                promoted: rng.gen_bool(0.1),
            };
            let mut r = support::random_record(&mut rng, &case.id);
            let m = r.metadata.as_mut().unwrap();
            m.created_at = Timestamp::from_millis(NOW_MS - (case.age_days * DAY_MS as f64) as i64);
            m.completed_at = Some(m.created_at);
            m.duration_ms = Some(0);
            m.pinned = case.pinned;
            m.promoted = case.promoted;
            write_record(&config.record_dir(&case.id), &r).map_err(|e| e.to_string())?;
            cases.push(case);
        }
        let now = Timestamp::from_millis(NOW_MS);
        let before = support::dir_hash(tmp.path());
        let planned = evict(&config, now, true).map_err(|e| e.to_string())?;
        ensure!(support::dir_hash(tmp.path()) == before, "seed {seed}: dry run changed the store");
        let plan = evict(&config, now, false).map_err(|e| e.to_string())?;
        let removed: std::collections::BTreeSet<String> =
            plan.removed.iter().map(|e| e.investigation_id.clone()).collect();
        let planned_ids: std::collections::BTreeSet<String> =
            planned.removed.iter().map(|e| e.investigation_id.clone()).collect();
        ensure!(planned_ids == removed, "seed {seed}: dry run and real run disagree");
        let expected = support::oracle_evict(&cases, f64::from(config.max_age_days), config.max_unpinned);
        ensure!(removed == expected, "seed {seed}: removed {removed:?}, policy says {expected:?}");
        for c in &cases {
            if c.pinned || c.promoted {
                ensure!(!removed.contains(&c.id), "seed {seed}: removed protected {}", c.id);
            }
        }
        let left = list_records(&config).map_err(|e| e.to_string())?.len();
        ensure!(left == cases.len() - removed.len(), "seed {seed}: {left} records left");
        removed_total += removed.len();
    }
    Ok(format!("30 random corpora, {removed_total} evictions match the age-then-count oracle, dry runs hash-stable"))
}

fn analytics_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0xa7a1);
    let records: Vec<ExecutionRecord> =
        (0..300).map(|i| support::random_record(&mut rng, &format!("SYN-{i:03}"))).collect();
    let corpus = Corpus::from_records(records.clone());
    for step in 1..=8 {
        let (got, want) = (replan_rate(&corpus, step), support::oracle_replan_rate(&records, step));
        ensure!(got == want, "replan_rate({step}) {got:?} vs {want:?}");
    }
    let mut labels = Vec::new();
    for r in &records {
        if rng.gen_bool(0.8) {
            labels.push(ExpertLabel { investigation_id: r.id().to_string(), expert_agrees: rng.gen_bool(0.6) });
        }
    }
    let lookup: HashMap<String, bool> = labels.iter().map(|l| (l.investigation_id.clone(), l.expert_agrees)).collect();
    for (width, buckets) in [(0.1, 10), (0.25, 4)] {
        let got = confidence_calibration(&corpus, &labels, width).map_err(|e| e.to_string())?;
        let counts: Vec<(usize, usize)> = got
            .buckets
            .iter()
            .map(|b| (b.n, b.agreement_rate.map_or(0, |r| (r * b.n as f64).round() as usize)))
            .collect();
        let want = support::oracle_calibration(&records, &lookup, buckets);
        ensure!(counts == want, "calibration width {width}: {counts:?} vs {want:?}");
    }
    for n in 1..=3 {
        let report = mine_evidence_patterns(&corpus, n, None).map_err(|e| e.to_string())?;
        let got: BTreeMap<Vec<String>, usize> =
            report.patterns.iter().map(|p| (p.tool_sequence.clone(), p.count)).collect();
        ensure!(got == support::oracle_patterns(&records, n), "{n}-gram counts differ");
    }
    let g = Corpus::from_records(vec![golden()]);
    let (after2, after1) = (replan_rate(&g, 2), replan_rate(&g, 1));
    ensure!(after2 == Some(1.0), "golden replan_rate(2) = {after2:?}");
    ensure!(after1 == Some(0.0), "golden replan_rate(1) = {after1:?}");
    Ok(format!(
        "{} synthetic records agree with scan oracles; golden replan_rate(2)=1.0, replan_rate(1)=0.0",
        records.len()
    ))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 8] = [
        ("golden corpus round-trip", golden_round_trip),
        ("invariant mutation suite", mutation_suite),
        ("proxy transparency", proxy_transparency),
        ("reconciler oracle equivalence", reconciler_oracles),
        ("mock replay report shape", mock_replay_report),
        ("storage benchmark", storage_benchmark),
        ("lifecycle policy", lifecycle_policy),
        ("analytics oracles", analytics_oracles),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let ms = start.elapsed().as_millis();
        match outcome {
            Ok(detail) => println!("criterion {} {name}: PASS ({detail}) [{ms} ms]", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {} {name}: FAIL ({why}) [{ms} ms]", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
