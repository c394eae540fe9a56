//! Single-writer lock file: `._lock` holding `{"acquired_at","pid"}`.

use std::fs::{self, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::record::canonical::to_canonical_string;
use crate::record::Timestamp;

pub const LOCK_FILE: &str = "._lock";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LockInfo {
    pub pid: u32,
    pub acquired_at: Timestamp,
}

#[derive(Debug)]
pub enum LockState {
    Free,
    Held(LockInfo),
    /// Holder process is gone.
    Stale(LockInfo),
    /// Lock file present but unreadable; treated as held.
    Corrupt,
}

pub fn pid_alive(pid: u32) -> bool {
    let Ok(pid) = libc::pid_t::try_from(pid) else {
        return false;
    };
    if pid <= 0 {
        return false;
    }
    // SAFETY: signal 0 performs only the existence and permission check.
    let rc = unsafe { libc::kill(pid, 0) };
    rc == 0 || io::Error::last_os_error().raw_os_error() == Some(libc::EPERM)
}

pub fn lock_state(dir: &Path) -> LockState {
    let path = dir.join(LOCK_FILE);
    match fs::read_to_string(&path) {
        Err(e) if e.kind() == io::ErrorKind::NotFound => LockState::Free,
        Err(_) => LockState::Corrupt,
        Ok(text) => match serde_json::from_str::<LockInfo>(&text) {
            Ok(info) if pid_alive(info.pid) => LockState::Held(info),
            Ok(info) => LockState::Stale(info),
            Err(_) => LockState::Corrupt,
        },
    }
}

/// Held lock; removed on release or drop.
#[derive(Debug)]
pub struct SessionLock {
    path: Option<PathBuf>,
}

impl SessionLock {
    /// Creates the lock file exclusively. `Ok(None)` when another lock file
    /// already exists.
    pub fn try_acquire(dir: &Path) -> io::Result<Option<SessionLock>> {
        let path = dir.join(LOCK_FILE);
        let mut file = match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(f) => f,
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => return Ok(None),
            Err(e) => return Err(e),
        };
        let info = LockInfo {
            pid: std::process::id(),
            acquired_at: Timestamp::now(),
        };
        let mut text = to_canonical_string(&info).map_err(io::Error::other)?;
        text.push('\n');
        file.write_all(text.as_bytes())?;
        file.sync_all()?;
        Ok(Some(SessionLock { path: Some(path) }))
    }

    pub fn release(&mut self) -> io::Result<()> {
        match self.path.take() {
            Some(path) => match fs::remove_file(path) {
                Err(e) if e.kind() != io::ErrorKind::NotFound => Err(e),
                _ => Ok(()),
            },
            None => Ok(()),
        }
    }
}

impl Drop for SessionLock {
    fn drop(&mut self) {
        let _ = self.release();
    }
}
