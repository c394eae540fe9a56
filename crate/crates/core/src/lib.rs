//! Agent Execution Records: a structured record format for autonomous
//! investigation agents, plus capture, verification, replay and analytics.

pub mod analytics;
pub mod codes;
pub mod intercept;
pub mod reconcile;
pub mod replay;
pub mod store;
pub mod record;
