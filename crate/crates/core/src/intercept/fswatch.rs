//! File-system layer: a background watcher writing `fs.jsonl`.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{channel, Receiver, RecvTimeoutError};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use notify::event::{EventKind, ModifyKind, RenameMode};
use notify::{Config, PollWatcher, RecommendedWatcher, RecursiveMode, Watcher};
use serde_json::json;
use thiserror::Error;

use super::{FsKind, FsLogEntry};
use crate::record::Timestamp;

pub const DEFAULT_DEBOUNCE: Duration = Duration::from_millis(50);
const TICK: Duration = Duration::from_millis(5);

#[derive(Debug, Error)]
pub enum FsWatcherError {
    #[error("watch directory {0} does not exist")]
    MissingDir(PathBuf),
    #[error("log path {log} is inside watched directory {dir}")]
    LogInsideWatchDir { log: PathBuf, dir: PathBuf },
    #[error("cannot open log {path}: {source}")]
    Log {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("watcher: {0}")]
    Notify(#[from] notify::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WatchMode {
    Native,
    Poll,
}

#[derive(Debug, Clone)]
pub struct FsWatcherOptions {
    /// Window within which repeated `modify` events for one path coalesce.
    pub debounce: Duration,
    pub poll_interval: Duration,
    /// Start in polling mode (used when native watches are known to be scarce).
    pub force_poll: bool,
}

impl Default for FsWatcherOptions {
    fn default() -> Self {
        FsWatcherOptions {
            debounce: DEFAULT_DEBOUNCE,
            poll_interval: Duration::from_millis(200),
            force_poll: false,
        }
    }
}

/// Handle to a running watcher; [`FsWatcher::stop`] flushes and joins it.
pub struct FsWatcher {
    mode: WatchMode,
    stop: Arc<AtomicBool>,
    worker: Option<JoinHandle<io::Result<u64>>>,
}

type EventRx = Receiver<notify::Result<notify::Event>>;


impl FsWatcher {
    pub fn start(
        watch_dirs: &[PathBuf],
        log_path: &Path,
        opts: FsWatcherOptions,
    ) -> Result<FsWatcher, FsWatcherError> {
        let dirs = watch_dirs
            .iter()
            .map(|d| d.canonicalize().map_err(|_| FsWatcherError::MissingDir(d.clone())))
            .collect::<Result<Vec<_>, _>>()?;
        let log_abs = absolute_log_path(log_path);
        if let Some(dir) = dirs.iter().find(|d| log_abs.starts_with(d)) {
            return Err(FsWatcherError::LogInsideWatchDir {
                log: log_path.to_path_buf(),
                dir: dir.clone(),
            });
        }
        let mut log = OpenOptions::new()
            .create(true)
            .append(true)
            .open(log_path)
            .map_err(|source| FsWatcherError::Log {
                path: log_path.to_path_buf(),
                source,
            })?;

        let (tx, rx) = channel();
        let (mode, watcher): (WatchMode, Box<dyn Watcher + Send>) = if opts.force_poll {
            write_mode_change(&mut log, WatchMode::Poll, "requested");
            (WatchMode::Poll, Box::new(start_poll(&dirs, tx, opts.poll_interval)?))
        } else {
            match start_native(&dirs, tx.clone()) {
                Ok(w) => (WatchMode::Native, Box::new(w)),
                Err(e) if is_watch_exhaustion(&e) => {
                    write_mode_change(&mut log, WatchMode::Poll, &e.to_string());
                    (WatchMode::Poll, Box::new(start_poll(&dirs, tx, opts.poll_interval)?))
                }
                Err(e) => return Err(e.into()),
            }
        };

        let stop = Arc::new(AtomicBool::new(false));
        let flag = stop.clone();
        let worker = thread::spawn(move || {
            let mut state = WatchLoop {
                log,
                pending: HashMap::new(),
                debounce: opts.debounce,
                written: 0,
                _watcher: watcher,
            };
            state.run(rx, &flag)
        });
        Ok(FsWatcher {
            mode,
            stop,
            worker: Some(worker),
        })
    }

    pub fn mode(&self) -> WatchMode {
        self.mode
    }

    /// Stops watching, flushes coalesced events and returns the number of
    /// entries written.
    pub fn stop(mut self) -> io::Result<u64> {
        self.shutdown()
    }

    fn shutdown(&mut self) -> io::Result<u64> {
        self.stop.store(true, Ordering::SeqCst);
        match self.worker.take() {
            Some(handle) => handle
                .join()
                .unwrap_or_else(|_| Err(io::Error::other("watcher thread panicked"))),
            None => Ok(0),
        }
    }
}

impl Drop for FsWatcher {
    fn drop(&mut self) {
        let _ = self.shutdown();
    }
}

fn absolute_log_path(log_path: &Path) -> PathBuf {
    let parent = log_path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    match (parent.canonicalize(), log_path.file_name()) {
        (Ok(p), Some(name)) => p.join(name),
        _ => log_path.to_path_buf(),
    }
}

fn start_native(
    dirs: &[PathBuf],
    tx: std::sync::mpsc::Sender<notify::Result<notify::Event>>,
) -> notify::Result<RecommendedWatcher> {
    let mut watcher = RecommendedWatcher::new(tx, Config::default())?;
    for dir in dirs {
        watcher.watch(dir, RecursiveMode::Recursive)?;
    }
    Ok(watcher)
}

fn start_poll(
    dirs: &[PathBuf],
    tx: std::sync::mpsc::Sender<notify::Result<notify::Event>>,
    interval: Duration,
) -> notify::Result<PollWatcher> {
    let mut watcher = PollWatcher::new(
        tx,
        Config::default()
            .with_poll_interval(interval)
            .with_compare_contents(true),
    )?;
    for dir in dirs {
        watcher.watch(dir, RecursiveMode::Recursive)?;
    }
    Ok(watcher)
}

fn is_watch_exhaustion(e: &notify::Error) -> bool {
    match &e.kind {
        notify::ErrorKind::MaxFilesWatch => true,
        notify::ErrorKind::Io(io) => io.raw_os_error() == Some(libc::ENOSPC),
        _ => false,
    }
}

fn write_mode_change(log: &mut File, mode: WatchMode, reason: &str) {
    let mode = match mode {
        WatchMode::Native => "native",
        WatchMode::Poll => "poll",
    };
    let line = json!({"ts": Timestamp::now(), "mode": mode, "reason": reason});
    let _ = log.write_all(format!("{line}\n").as_bytes());
}

/// Maps a notify event onto log entry kinds; `None` for events we do not log.
fn classify(event: &notify::Event) -> Vec<(FsKind, PathBuf)> {
    let all = |kind| event.paths.iter().map(|p| (kind, p.clone())).collect();
    match &event.kind {
        EventKind::Create(_) => all(FsKind::Create),
        EventKind::Remove(_) => all(FsKind::Delete),
        EventKind::Modify(ModifyKind::Name(RenameMode::From)) => all(FsKind::Delete),
        EventKind::Modify(ModifyKind::Name(RenameMode::To)) => all(FsKind::Create),
        EventKind::Modify(ModifyKind::Name(RenameMode::Both)) => {
            let mut out = Vec::new();
            if let Some(from) = event.paths.first() {
                out.push((FsKind::Delete, from.clone()));
            }
            if let Some(to) = event.paths.get(1) {
                out.push((FsKind::Create, to.clone()));
            }
            out
        }
        EventKind::Modify(ModifyKind::Name(_)) => event
            .paths
            .iter()
            .map(|p| {
                let kind = if p.exists() { FsKind::Create } else { FsKind::Delete };
                (kind, p.clone())
            })
            .collect(),
        EventKind::Modify(ModifyKind::Metadata(_)) => Vec::new(),
        EventKind::Modify(_) => all(FsKind::Modify),
        _ => Vec::new(),
    }
}

struct PendingModify {
    first: Timestamp,
    last: Instant,
}

struct WatchLoop {
    log: File,
    pending: HashMap<PathBuf, PendingModify>,
    debounce: Duration,
    written: u64,
    _watcher: Box<dyn Watcher + Send>,
}

impl WatchLoop {
    fn run(&mut self, rx: EventRx, stop: &AtomicBool) -> io::Result<u64> {
        loop {
            if stop.load(Ordering::SeqCst) {
                // drain whatever the backend already delivered
                while let Ok(event) = rx.try_recv() {
                    self.handle(event)?;
                }
                break;
            }
            match rx.recv_timeout(TICK) {
                Ok(event) => self.handle(event)?,
                Err(RecvTimeoutError::Timeout) => {}
                Err(RecvTimeoutError::Disconnected) => break,
            }
            self.flush_due(false)?;
        }
        self.flush_due(true)?;
        self.log.sync_data()?;
        Ok(self.written)
    }

    fn handle(&mut self, event: notify::Result<notify::Event>) -> io::Result<()> {
        let Ok(event) = event else {
            return Ok(());
        };
        let now = Timestamp::now();
        for (kind, path) in classify(&event) {
            match kind {
                FsKind::Modify => {
                    let entry = self.pending.entry(path).or_insert(PendingModify {
                        first: now,
                        last: Instant::now(),
                    });
                    entry.last = Instant::now();
                }
                _ => {
                    if let Some(p) = self.pending.remove(&path) {
                        self.write(p.first, FsKind::Modify, &path)?;
                    }
                    self.write(now, kind, &path)?;
                }
            }
        }
        Ok(())
    }

    fn flush_due(&mut self, all: bool) -> io::Result<()> {
        let debounce = self.debounce;
        let mut due: Vec<(PathBuf, Timestamp)> = self
            .pending
            .iter()
            .filter(|(_, p)| all || p.last.elapsed() >= debounce)
            .map(|(path, p)| (path.clone(), p.first))
            .collect();
        due.sort_by_key(|(_, ts)| *ts);
        for (path, first) in due {
            self.pending.remove(&path);
            self.write(first, FsKind::Modify, &path)?;
        }
        Ok(())
    }

    fn write(&mut self, ts: Timestamp, kind: FsKind, path: &Path) -> io::Result<()> {
        let entry = FsLogEntry {
            ts,
            kind,
            path: path.to_string_lossy().into_owned(),
        };
        let mut line = serde_json::to_vec(&entry).map_err(io::Error::other)?;
        line.push(b'\n');
        self.log.write_all(&line)?;
        self.written += 1;
        Ok(())
    }
}
