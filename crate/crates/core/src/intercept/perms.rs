//! Verifies that an interceptor log directory is read-only to the agent.
//!
//! Enforcement itself belongs to the container build; this only reports.

use std::fs;
use std::io;
use std::os::unix::fs::MetadataExt;
use std::path::{Path, PathBuf};

use serde::Serialize;

#[derive(Debug, Clone, Serialize)]
pub struct PermissionFinding {
    pub path: PathBuf,
    pub owner_uid: u32,
    pub mode: String,
    pub problem: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct PermissionReport {
    pub dir: PathBuf,
    pub agent_uid: u32,
    pub checked: usize,
    pub findings: Vec<PermissionFinding>,
}

impl PermissionReport {
    pub fn ok(&self) -> bool {
        self.findings.is_empty()
    }
}

/// Checks `dir` and every file in it: none may be owned-and-writable by
/// `agent_uid`, and none may be group- or world-writable.
pub fn check_log_permissions(dir: &Path, agent_uid: u32) -> io::Result<PermissionReport> {
    let mut paths = vec![dir.to_path_buf()];
    for entry in fs::read_dir(dir)? {
        paths.push(entry?.path());
    }
    paths[1..].sort();
    let mut findings = Vec::new();
    for path in &paths {
        let meta = fs::metadata(path)?;
        let mode = meta.mode() & 0o7777;
        let mut problems = Vec::new();
        if meta.uid() == agent_uid && mode & 0o200 != 0 {
            problems.push("owned and writable by the agent user");
        }
        if mode & 0o020 != 0 {
            problems.push("group-writable");
        }
        if mode & 0o002 != 0 {
            problems.push("world-writable");
        }
        if !problems.is_empty() {
            findings.push(PermissionFinding {
                path: path.clone(),
                owner_uid: meta.uid(),
                mode: format!("{mode:04o}"),
                problem: problems.join(", "),
            });
        }
    }
    Ok(PermissionReport {
        dir: dir.to_path_buf(),
        agent_uid,
        checked: paths.len(),
        findings,
    })
}
