//! Scripted captures: an envelope plus an ordered list of plan, step and
//! verdict events, driven through a [`CaptureSession`].

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{start_investigation, StoreConfig, StoreError};
use crate::record::{Envelope, Metadata, Plan, Step, Verdict};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioEvent {
    Plan(Plan),
    Step(Step),
    Verdict(Verdict),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub envelope: Envelope,
    pub events: Vec<ScenarioEvent>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cost_usd: Option<f64>,
    /// Extension metadata fields set before finalizing.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metadata: BTreeMap<String, Value>,
    /// Stop before finalizing, leaving the record as a crashed writer would.
    #[serde(default)]
    pub skip_finalize: bool,
}

impl Scenario {
    pub fn from_file(path: &Path) -> Result<Self, StoreError> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| {
            StoreError::Parse(crate::record::ParseError::Malformed {
                file: path.display().to_string(),
                line: Some(e.line()),
                message: e.to_string(),
            })
        })
    }
}

/// Replays the scenario through a capture session; returns the final
/// metadata (or the initial metadata when `skip_finalize` is set).
pub fn run_scenario(config: &StoreConfig, scenario: &Scenario) -> Result<Metadata, StoreError> {
    let mut session = start_investigation(config, scenario.envelope.clone())?;
    for event in &scenario.events {
        match event {
            ScenarioEvent::Plan(p) => {
                session.log_plan(p.clone())?;
            }
            ScenarioEvent::Step(s) => {
                session.log_step(s.clone())?;
            }
            ScenarioEvent::Verdict(v) => session.record_verdict(v.clone())?,
        }
    }
    if let Some(cost) = scenario.cost_usd {
        session.set_metadata_field("cost_usd", Value::from(cost))?;
    }
    for (key, value) in &scenario.metadata {
        session.set_metadata_field(key, value.clone())?;
    }
    if scenario.skip_finalize {
        return Ok(session.metadata().clone());
    }
    session.finalize()
}
