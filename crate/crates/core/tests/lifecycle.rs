mod support;

use std::collections::BTreeSet;
use std::fs;

use aer_core::codes::Code;
use aer_core::record::{
    parse_record, validate_record, write_record, Timestamp, ENVELOPE_FILE, METADATA_FILE,
    PLANS_FILE, STEPS_FILE, VERDICT_FILE,
};
use aer_core::store::{
    evict, list_records, pin, promote, start_investigation, unpin, EvictionReason, FieldSelector,
    StoreConfig, REDACTED,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

const DAY_MS: i64 = 86_400_000;
const NOW_MS: i64 = 1_780_000_000_000;

fn now() -> Timestamp {
    Timestamp::from_millis(NOW_MS)
}

/// Writes a valid record created `age_days` before [`now`].
fn put(config: &StoreConfig, rng: &mut ChaCha8Rng, id: &str, age_days: f64, pinned: bool, promoted: bool) {
    let mut r = support::random_record(rng, id);
    let m = r.metadata.as_mut().unwrap();
    m.created_at = Timestamp::from_millis(NOW_MS - (age_days * DAY_MS as f64) as i64);
    m.completed_at = Some(m.created_at);
    m.duration_ms = Some(0);
    m.pinned = pinned;
    m.promoted = promoted;
    write_record(&config.record_dir(id), &r).unwrap();
}

fn golden_store() -> (tempfile::TempDir, StoreConfig) {
    let tmp = tempfile::tempdir().unwrap();
    support::copy_tree(&support::golden_root(), tmp.path());
    let config = StoreConfig::new(tmp.path());
    (tmp, config)
}

#[test]
fn list_is_newest_first_and_reports_unreadable_entries_last() {
    let tmp = tempfile::tempdir().unwrap();
    let config = StoreConfig::new(tmp.path());
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    put(&config, &mut rng, "OLD-1", 3.0, false, false);
    put(&config, &mut rng, "NEW-1", 1.0, true, false);
    fs::create_dir_all(config.record_dir("BROKEN-1")).unwrap();
    fs::write(config.record_dir("BROKEN-1").join(METADATA_FILE), "{").unwrap();

    let list = list_records(&config).unwrap();
    let ids: Vec<&str> = list.iter().map(|s| s.investigation_id.as_str()).collect();
    assert_eq!(ids, ["NEW-1", "OLD-1", "BROKEN-1"]);
    assert!(list[0].pinned);
    assert!(list[2].degraded.is_some());
}

#[test]
fn list_of_an_empty_store_is_empty() {
    let tmp = tempfile::tempdir().unwrap();
    assert!(list_records(&StoreConfig::new(tmp.path())).unwrap().is_empty());
}

#[test]
fn pin_and_unpin_touch_only_metadata() {
    let (_tmp, config) = golden_store();
    let dir = config.record_dir(support::GOLDEN_ID);
    let before = fs::read(dir.join(STEPS_FILE)).unwrap();
    assert!(pin(&config, support::GOLDEN_ID).unwrap().pinned);
    assert!(list_records(&config).unwrap()[0].pinned);
    assert!(!unpin(&config, support::GOLDEN_ID).unwrap().pinned);
    assert_eq!(fs::read(dir.join(STEPS_FILE)).unwrap(), before);
    assert_eq!(pin(&config, "NOPE-1").unwrap_err().code(), Code::NotFound);
}

#[test]
fn promotion_redacts_selected_fields_and_copies_the_rest_verbatim() {
    let (_tmp, mut config) = golden_store();
    config.redaction_rules = vec![FieldSelector::parse("steps.*.tool_calls.*.output").unwrap()];
    let p = promote(&config, support::GOLDEN_ID, false).unwrap();
    assert_eq!(p.redacted_values, 4);
    let dest = config.promoted_dir(support::GOLDEN_ID);
    let src = support::golden_dir();
    for file in [ENVELOPE_FILE, PLANS_FILE, VERDICT_FILE] {
        assert_eq!(fs::read(dest.join(file)).unwrap(), fs::read(src.join(file)).unwrap(), "{file}");
    }
    let copy = parse_record(&dest).unwrap();
    assert_eq!(validate_record(&copy), vec![]);
    assert!(copy.steps.iter().flat_map(|s| &s.tool_calls).all(|c| c.output == json!(REDACTED)));
    assert!(copy.metadata.unwrap().promoted);
    let live = parse_record(&config.record_dir(support::GOLDEN_ID)).unwrap();
    assert!(live.metadata.unwrap().promoted);
    assert_ne!(live.steps[0].tool_calls[0].output, json!(REDACTED));
}

#[test]
fn promotion_that_would_break_the_schema_is_refused() {
    let (tmp, mut config) = golden_store();
    let before = support::dir_hash(tmp.path());
    for selector in ["steps.*.step_id", "envelope.authority.authority_chain", "verdict.confidence"] {
        config.redaction_rules = vec![FieldSelector::parse(selector).unwrap()];
        let err = promote(&config, support::GOLDEN_ID, false).unwrap_err();
        assert_eq!(err.code(), Code::RedactionBreaksSchema, "{selector}");
    }
    assert_eq!(support::dir_hash(tmp.path()), before);
}

#[test]
fn promotion_of_an_invalid_record_is_refused() {
    let (_tmp, config) = golden_store();
    let dir = config.record_dir(support::GOLDEN_ID);
    let mut r = parse_record(&dir).unwrap();
    r.verdict.as_mut().unwrap().confidence = 2.0;
    write_record(&dir, &r).unwrap();
    assert_eq!(promote(&config, support::GOLDEN_ID, false).unwrap_err().code(), Code::RecordInvalid);
}

#[test]
fn dry_runs_leave_the_store_untouched() {
    let tmp = tempfile::tempdir().unwrap();
    support::copy_tree(&support::golden_root(), tmp.path());
    let mut config = StoreConfig::new(tmp.path());
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for i in 0..20 {
        put(&config, &mut rng, &format!("DRY-{i}"), i as f64, false, false);
    }
    config.max_unpinned = 3;
    config.redaction_rules = vec![FieldSelector::parse("steps.*.observation").unwrap()];
    let before = support::dir_hash(tmp.path());
    let plan = evict(&config, now(), true).unwrap();
    assert!(plan.dry_run);
    assert!(!plan.removed.is_empty());
    let p = promote(&config, support::GOLDEN_ID, true).unwrap();
    assert_eq!(p.redacted_values, 4);
    assert_eq!(support::dir_hash(tmp.path()), before);
}

#[test]
fn count_cap_keeps_the_newest_unpinned_records() {
    let tmp = tempfile::tempdir().unwrap();
    let mut config = StoreConfig::new(tmp.path());
    config.max_unpinned = 10;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for i in 0..60 {
        put(&config, &mut rng, &format!("CAP-{i:02}"), i as f64 / 10.0, false, false);
    }
    let plan = evict(&config, now(), false).unwrap();
    assert_eq!(plan.removed.len(), 50);
    assert!(plan.removed.iter().all(|e| e.reason == EvictionReason::Count));
    let left: Vec<String> = list_records(&config).unwrap().into_iter().map(|s| s.investigation_id).collect();
    let expected: Vec<String> = (0..10).map(|i| format!("CAP-{i:02}")).collect();
    assert_eq!(left, expected);
}

#[test]
fn age_limit_removes_old_records_but_never_pinned_promoted_or_open_ones() {
    let tmp = tempfile::tempdir().unwrap();
    let config = StoreConfig::new(tmp.path());
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for i in 0..5 {
        put(&config, &mut rng, &format!("AGED-{i}"), 15.0 + i as f64, false, false);
    }
    for i in 0..5 {
        put(&config, &mut rng, &format!("FRESH-{i}"), 13.9, false, false);
    }
    put(&config, &mut rng, "PINNED-1", 100.0, true, false);
    put(&config, &mut rng, "PROMOTED-1", 100.0, false, true);
    let _open = start_investigation(&config, support::random_record(&mut rng, "OPEN-1").envelope).unwrap();
    fs::create_dir_all(config.record_dir("JUNK-1")).unwrap();

    let plan = evict(&config, now(), false).unwrap();
    let removed: BTreeSet<String> = plan.removed.iter().map(|e| e.investigation_id.clone()).collect();
    let expected: BTreeSet<String> = (0..5).map(|i| format!("AGED-{i}")).collect();
    assert_eq!(removed, expected);
    assert!(plan.removed.iter().all(|e| e.reason == EvictionReason::Age));
    let reason = |id: &str| plan.kept.iter().find(|e| e.investigation_id == id).unwrap().reason;
    assert_eq!(reason("PINNED-1"), EvictionReason::Pinned);
    assert_eq!(reason("PROMOTED-1"), EvictionReason::Promoted);
    assert_eq!(reason("JUNK-1"), EvictionReason::Unreadable);
    assert_eq!(reason("FRESH-0"), EvictionReason::WithinPolicy);
    assert!(config.record_dir("OPEN-1").exists());
    for id in &expected {
        assert!(!config.record_dir(id).exists());
    }
}

#[test]
fn eviction_never_touches_promoted_copies() {
    let (_tmp, mut config) = golden_store();
    promote(&config, support::GOLDEN_ID, false).unwrap();
    unpin(&config, support::GOLDEN_ID).unwrap();
    // clear the promoted flag on the live copy so it becomes a candidate
    let dir = config.record_dir(support::GOLDEN_ID);
    let mut r = parse_record(&dir).unwrap();
    r.metadata.as_mut().unwrap().promoted = false;
    write_record(&dir, &r).unwrap();
    config.max_unpinned = 0;
    let plan = evict(&config, now(), false).unwrap();
    assert_eq!(plan.removed.len(), 1);
    assert!(!dir.exists());
    assert!(config.promoted_dir(support::GOLDEN_ID).join(ENVELOPE_FILE).is_file());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn eviction_matches_the_policy_oracle(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tmp = tempfile::tempdir().unwrap();
        let mut config = StoreConfig::new(tmp.path());
        config.max_age_days = rng.gen_range(1..30);
        config.max_unpinned = rng.gen_range(0..40);
        let n = rng.gen_range(0..=200);
        let mut cases = Vec::new();
        for i in 0..n {
            let case = support::EvictCase {
                id: format!("EV-{i:03}"),
                // whole milliseconds so the oracle sees what is stored
                age_days: rng.gen_range(0..60 * DAY_MS) as f64 / DAY_MS as f64,
                pinned: rng.gen_bool(0.15),
                promoted: rng.gen_bool(0.1),
            };
            put(&config, &mut rng, &case.id, case.age_days, case.pinned, case.promoted);
            cases.push(case);
        }
        let expected = support::oracle_evict(&cases, f64::from(config.max_age_days), config.max_unpinned);
        let plan = evict(&config, now(), false).unwrap();
        let removed: BTreeSet<String> = plan.removed.iter().map(|e| e.investigation_id.clone()).collect();
        prop_assert_eq!(&removed, &expected);
        let left: BTreeSet<String> = list_records(&config).unwrap().into_iter().map(|s| s.investigation_id).collect();
        let all: BTreeSet<String> = cases.iter().map(|c| c.id.clone()).collect();
        prop_assert_eq!(left, all.difference(&expected).cloned().collect::<BTreeSet<_>>());
    }
}
