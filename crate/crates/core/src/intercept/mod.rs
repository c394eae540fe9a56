//! Ground-truth capture that runs outside the agent's control.
//!
//! Three independent layers write JSONL logs into a directory the agent can
//! read but not modify: a transparent stdio JSON-RPC proxy (`rpc-<name>.jsonl`),
//! a shell DEBUG trap (`shell.jsonl`) and a file-system watcher (`fs.jsonl`).

mod fswatch;
mod load;
mod perms;
mod proxy;
mod shell;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::record::Timestamp;

pub use fswatch::{FsWatcher, FsWatcherError, FsWatcherOptions, WatchMode, DEFAULT_DEBOUNCE};
pub use load::{load_intercept_logs, pair_rpc_entries, InterceptLog, LoadWarning};
pub use perms::{check_log_permissions, PermissionFinding, PermissionReport};
pub use proxy::{run_stdio_proxy, run_stdio_proxy_with, ProxyError, ProxyOutcome};
pub use shell::{shell_trap_script, SHELL_LOG_ENV};

pub const SHELL_LOG_FILE: &str = "shell.jsonl";
pub const FS_LOG_FILE: &str = "fs.jsonl";

/// Log file name for a wrapped RPC server.
pub fn rpc_log_file(server: &str) -> String {
    format!("rpc-{server}.jsonl")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Request,
    Response,
    Notification,
    /// A line on the wire that was not a JSON-RPC message.
    Degraded,
}

/// Which side of the proxy produced a message.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Peer {
    /// The caller (the agent) writing to the wrapped server's stdin.
    #[default]
    Client,
    /// The wrapped server writing to its stdout.
    Server,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RpcError {
    pub code: i64,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RpcLogEntry {
    pub ts: Timestamp,
    pub server: String,
    pub direction: Direction,
    #[serde(default = "default_peer")]
    pub from: Peer,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub method: Option<String>,
    /// Canonical JSON text of `params`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params_canonical: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result_canonical: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<RpcError>,
    /// Response with no earlier request carrying the same id.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub orphan: bool,
    /// Original line for degraded entries.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw: Option<String>,
}

fn default_peer() -> Peer {
    Peer::Client
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShellLogEntry {
    pub ts: Timestamp,
    pub pid: i64,
    pub cwd: String,
    pub argv: Vec<String>,
}

impl ShellLogEntry {
    /// Binary name without its directory.
    pub fn binary(&self) -> &str {
        let first = self.argv.first().map(String::as_str).unwrap_or("");
        first.rsplit('/').next().unwrap_or(first)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FsKind {
    Create,
    Modify,
    Delete,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FsLogEntry {
    pub ts: Timestamp,
    pub kind: FsKind,
    pub path: String,
}
