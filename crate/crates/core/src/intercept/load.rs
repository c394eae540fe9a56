use std::collections::HashSet;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use super::{Direction, FsLogEntry, Peer, RpcLogEntry, ShellLogEntry, FS_LOG_FILE, SHELL_LOG_FILE};
use crate::record::canonical::canonical_text;

/// A line that could not be used.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LoadWarning {
    pub file: String,
    pub line: usize,
    pub message: String,
}

/// The three ground-truth streams, each sorted by timestamp (stable on ties).
#[derive(Debug, Clone, Default, Serialize)]
pub struct InterceptLog {
    pub rpc: Vec<RpcLogEntry>,
    pub shell: Vec<ShellLogEntry>,
    pub fs: Vec<FsLogEntry>,
    pub warnings: Vec<LoadWarning>,
    /// Watcher mode switches (e.g. to polling) found in `fs.jsonl`.
    pub fs_mode_changes: usize,
    /// Whether any log file was present at all.
    pub files_found: usize,
}

impl InterceptLog {
    pub fn is_empty(&self) -> bool {
        self.rpc.is_empty() && self.shell.is_empty() && self.fs.is_empty()
    }
}

fn read_lines<T: DeserializeOwned>(
    path: &Path,
    warnings: &mut Vec<LoadWarning>,
    mut skip: impl FnMut(&Value) -> bool,
) -> io::Result<Vec<T>> {
    let text = fs::read_to_string(path)?;
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let complete = text.ends_with('\n');
    let lines: Vec<&str> = text.split('\n').collect();
    let last = lines.len() - 1;
    let mut out = Vec::new();
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        if i == last && !complete {
            // in-progress append; a complete message would end in '\n'
            if let Ok(item) = serde_json::from_str(line) {
                out.push(item);
            } else {
                warnings.push(LoadWarning {
                    file: name.clone(),
                    line: i + 1,
                    message: "trailing partial line ignored".into(),
                });
            }
            continue;
        }
        let parsed = serde_json::from_str::<Value>(line).and_then(|value| {
            if skip(&value) {
                Ok(None)
            } else {
                serde_json::from_value::<T>(value).map(Some)
            }
        });
        match parsed {
            Ok(Some(item)) => out.push(item),
            Ok(None) => {}
            Err(e) => warnings.push(LoadWarning {
                file: name.clone(),
                line: i + 1,
                message: e.to_string(),
            }),
        }
    }
    Ok(out)
}

/// Loads `rpc-*.jsonl`, `shell.jsonl` and `fs.jsonl` from an interceptor
/// log directory. Missing files are treated as empty streams.
pub fn load_intercept_logs(dir: &Path) -> io::Result<InterceptLog> {
    let mut log = InterceptLog::default();
    if !dir.is_dir() {
        return Ok(log);
    }
    let mut rpc_files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("rpc-") && n.ends_with(".jsonl"))
        })
        .collect();
    rpc_files.sort();
    for path in &rpc_files {
        log.files_found += 1;
        let mut entries: Vec<RpcLogEntry> = read_lines(path, &mut log.warnings, |_| false)?;
        pair_rpc_entries(&mut entries);
        log.rpc.extend(entries);
    }
    let shell_path = dir.join(SHELL_LOG_FILE);
    if shell_path.is_file() {
        log.files_found += 1;
        log.shell = read_lines(&shell_path, &mut log.warnings, |_| false)?;
    }
    let fs_path = dir.join(FS_LOG_FILE);
    if fs_path.is_file() {
        log.files_found += 1;
        let mut mode_changes = 0;
        log.fs = read_lines(&fs_path, &mut log.warnings, |v| {
            let is_mode = v.get("mode").is_some();
            mode_changes += is_mode as usize;
            is_mode
        })?;
        log.fs_mode_changes = mode_changes;
    }
    log.rpc.sort_by_key(|e| e.ts);
    log.shell.sort_by_key(|e| e.ts);
    log.fs.sort_by_key(|e| e.ts);
    Ok(log)
}

/// Recomputes `orphan` for the responses of one server's log: a response is
/// paired when an earlier request from the other peer carried the same id.
pub fn pair_rpc_entries(entries: &mut [RpcLogEntry]) {
    let mut pending: HashSet<(String, Peer, String)> = HashSet::new();
    for entry in entries.iter_mut() {
        let Some(id) = entry.id.as_ref().map(canonical_text) else {
            continue;
        };
        match entry.direction {
            Direction::Request => {
                pending.insert((entry.server.clone(), entry.from, id));
            }
            Direction::Response => {
                let requester = match entry.from {
                    Peer::Client => Peer::Server,
                    Peer::Server => Peer::Client,
                };
                entry.orphan = !pending.remove(&(entry.server.clone(), requester, id));
            }
            _ => {}
        }
    }
}
