mod support;

use std::fs;
use std::time::Instant;

use aer_core::codes::{Code, ERRORS_JSON};
use aer_core::record::{
    parse_record, validate_record, write_record, ENVELOPE_FILE, METADATA_FILE, PLANS_FILE,
    STEPS_FILE, VERDICT_FILE,
};
use serde_json::Value;

const FILES: [&str; 5] = [ENVELOPE_FILE, PLANS_FILE, STEPS_FILE, VERDICT_FILE, METADATA_FILE];

#[test]
fn golden_record_parses_validates_and_reserializes_byte_for_byte() {
    let started = Instant::now();
    let record = parse_record(&support::golden_dir()).unwrap();
    assert_eq!(validate_record(&record), vec![]);

    let out = tempfile::tempdir().unwrap();
    let dir = out.path().join(support::GOLDEN_ID);
    write_record(&dir, &record).unwrap();
    for file in FILES {
        let expected = fs::read(support::golden_dir().join(file)).unwrap();
        let actual = fs::read(dir.join(file)).unwrap();
        assert_eq!(
            String::from_utf8_lossy(&actual),
            String::from_utf8_lossy(&expected),
            "{file} differs"
        );
    }
    assert!(started.elapsed().as_secs_f64() < 1.0);
}

#[test]
fn golden_record_has_expected_shape() {
    let record = parse_record(&support::golden_dir()).unwrap();
    assert_eq!(record.plans.len(), 2);
    assert_eq!(record.plans[1].revision_trigger.as_deref(), Some("step_002"));
    assert_eq!(record.steps.len(), 4);
    let verdict = record.verdict.as_ref().unwrap();
    assert_eq!(verdict.root_cause_category, "Infrastructure > Memory > OOM Kill");
    assert_eq!(verdict.confidence, 0.95);
    assert_eq!(verdict.evidence_chain, ["step_002", "step_003", "step_004"]);
    let chain = &record.envelope.authority.authority_chain;
    assert_eq!(chain.len(), 3);
    assert_eq!(chain.last().unwrap().principal, "rca-agent-v2.4.1");
}

#[test]
fn every_file_is_one_canonical_line_per_value() {
    for file in FILES {
        let text = fs::read_to_string(support::golden_dir().join(file)).unwrap();
        assert!(text.ends_with('\n'), "{file}");
        for line in text.lines() {
            let v: Value = serde_json::from_str(line).unwrap();
            assert_eq!(aer_core::record::canonical::canonical_text(&v), line, "{file}");
        }
    }
}

#[test]
fn errors_asset_lists_exactly_the_code_enum() {
    let asset: Value = serde_json::from_str(ERRORS_JSON).unwrap();
    let listed: Vec<&str> = asset["codes"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_str().unwrap())
        .collect();
    let ours: Vec<&str> = Code::ALL.iter().map(|c| c.as_str()).collect();
    assert_eq!(listed, ours);
    for code in listed {
        assert_eq!(Code::parse(code).map(Code::as_str), Some(code));
    }
}
