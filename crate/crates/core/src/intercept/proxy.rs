//! Transparent stdio JSON-RPC proxy.
//!
//! Bytes are forwarded in whatever chunks the OS hands us, so the caller and
//! the wrapped server see exactly the streams they would see over a direct
//! pipe. Complete lines are copied to a logger thread, which parses
//! newline-delimited JSON-RPC and appends one entry per message. Lines are
//! queued for logging before their bytes are forwarded, so a request is
//! always logged ahead of the response it provokes.

use std::collections::HashSet;
use std::fs::{File, OpenOptions};
use std::io::{self, Read, Write};
use std::path::Path;
use std::process::{Child, Command, ExitStatus, Stdio};
use std::sync::mpsc::{sync_channel, Receiver, SyncSender};
use std::thread;

use serde_json::Value;
use thiserror::Error;

use super::{Direction, Peer, RpcError, RpcLogEntry};
use crate::record::canonical::canonical_text;
use crate::record::Timestamp;

const CHUNK: usize = 64 * 1024;
const QUEUE_DEPTH: usize = 256;

#[derive(Debug, Error)]
pub enum ProxyError {
    #[error("no command given to wrap")]
    EmptyCommand,
    #[error("failed to spawn {program}: {source}")]
    Spawn {
        program: String,
        #[source]
        source: io::Error,
    },
    #[error("waiting for child: {0}")]
    Wait(#[source] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProxyOutcome {
    /// Exit code to propagate: the child's code, or 128 + signal.
    pub exit_code: i32,
    pub entries_logged: u64,
    /// Entries lost to log write failures; forwarding never stops for them.
    pub entries_dropped: u64,
}

enum LogMsg {
    Line(Peer, Timestamp, Vec<u8>),
    Shutdown,
}

/// Runs `child_argv` behind the proxy using this process's stdin/stdout.
/// The child's stderr is inherited untouched.
pub fn run_stdio_proxy(
    child_argv: &[String],
    log_path: &Path,
    server_name: &str,
) -> Result<ProxyOutcome, ProxyError> {
    let outcome = run_stdio_proxy_with(
        child_argv,
        log_path,
        server_name,
        io::stdin(),
        io::stdout(),
    )?;
    if outcome.entries_dropped > 0 {
        eprintln!(
            "aer intercept rpc: {} log entries dropped (log write failures)",
            outcome.entries_dropped
        );
    }
    Ok(outcome)
}

/// Same as [`run_stdio_proxy`] with explicit caller-side streams.
pub fn run_stdio_proxy_with<R, W>(
    child_argv: &[String],
    log_path: &Path,
    server_name: &str,
    caller_in: R,
    caller_out: W,
) -> Result<ProxyOutcome, ProxyError>
where
    R: Read + Send + 'static,
    W: Write + Send + 'static,
{
    let (program, args) = child_argv.split_first().ok_or(ProxyError::EmptyCommand)?;
    let mut child: Child = Command::new(program)
        .args(args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::inherit())
        .spawn()
        .map_err(|source| ProxyError::Spawn {
            program: program.clone(),
            source,
        })?;
    let child_in = child.stdin.take().expect("piped stdin");
    let child_out = child.stdout.take().expect("piped stdout");

    // A log we cannot open does not stop forwarding; every entry counts as dropped.
    let log_file = OpenOptions::new().create(true).append(true).open(log_path).ok();
    let (tx, rx) = sync_channel::<LogMsg>(QUEUE_DEPTH);
    let server = server_name.to_string();
    let logger = thread::spawn(move || run_logger(rx, log_file, &server));

    let tx_up = tx.clone();
    // Not joined: the caller may never close its end after the child exits.
    thread::spawn(move || pump(caller_in, child_in, Peer::Client, tx_up));
    let tx_down = tx.clone();
    let downstream = thread::spawn(move || pump(child_out, caller_out, Peer::Server, tx_down));

    let status = child.wait().map_err(ProxyError::Wait)?;
    let _ = downstream.join();
    let _ = tx.send(LogMsg::Shutdown);
    let (entries_logged, entries_dropped) = logger.join().unwrap_or((0, 0));
    Ok(ProxyOutcome {
        exit_code: exit_code(status),
        entries_logged,
        entries_dropped,
    })
}

fn exit_code(status: ExitStatus) -> i32 {
    if let Some(code) = status.code() {
        return code;
    }
    #[cfg(unix)]
    {
        use std::os::unix::process::ExitStatusExt;
        if let Some(sig) = status.signal() {
            return 128 + sig;
        }
    }
    1
}

/// Copies `src` to `dst` chunk by chunk, handing complete lines to the
/// logger before the chunk that completes them is forwarded.
fn pump<R: Read, W: Write>(mut src: R, mut dst: W, from: Peer, tx: SyncSender<LogMsg>) {
    let mut buf = vec![0u8; CHUNK];
    let mut line: Vec<u8> = Vec::new();
    let mut logging = true;
    loop {
        let n = match src.read(&mut buf) {
            Ok(0) => break,
            Ok(n) => n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
            Err(_) => break,
        };
        let chunk = &buf[..n];
        let mut start = 0;
        for (i, b) in chunk.iter().enumerate() {
            if *b == b'\n' {
                line.extend_from_slice(&chunk[start..=i]);
                start = i + 1;
                let complete = std::mem::take(&mut line);
                if logging && tx.send(LogMsg::Line(from, Timestamp::now(), complete)).is_err() {
                    logging = false;
                }
            }
        }
        line.extend_from_slice(&chunk[start..]);
        if dst.write_all(chunk).and_then(|_| dst.flush()).is_err() {
            break;
        }
    }
    if logging && !line.is_empty() {
        let _ = tx.send(LogMsg::Line(from, Timestamp::now(), line));
    }
    // dropping `dst` closes the child's stdin on caller EOF
}

fn run_logger(rx: Receiver<LogMsg>, mut file: Option<File>, server: &str) -> (u64, u64) {
    let mut pending: HashSet<(Peer, String)> = HashSet::new();
    let (mut logged, mut dropped) = (0u64, 0u64);
    while let Ok(msg) = rx.recv() {
        let LogMsg::Line(from, ts, bytes) = msg else {
            break;
        };
        for entry in entries_for_line(server, from, ts, &bytes, &mut pending) {
            let ok = match file.as_mut() {
                Some(f) => serde_json::to_vec(&entry)
                    .map_err(io::Error::other)
                    .and_then(|mut line| {
                        line.push(b'\n');
                        f.write_all(&line)
                    })
                    .is_ok(),
                None => false,
            };
            if ok {
                logged += 1;
            } else {
                dropped += 1;
            }
        }
    }
    if let Some(f) = file.as_mut() {
        let _ = f.sync_data();
    }
    (logged, dropped)
}

fn trim_newline(bytes: &[u8]) -> &[u8] {
    let bytes = bytes.strip_suffix(b"\n").unwrap_or(bytes);
    bytes.strip_suffix(b"\r").unwrap_or(bytes)
}

/// Turns one wire line into log entries. Batches yield one entry per member.
pub(crate) fn entries_for_line(
    server: &str,
    from: Peer,
    ts: Timestamp,
    bytes: &[u8],
    pending: &mut HashSet<(Peer, String)>,
) -> Vec<RpcLogEntry> {
    let body = trim_newline(bytes);
    let degraded = || RpcLogEntry {
        ts,
        server: server.to_string(),
        direction: Direction::Degraded,
        from,
        id: None,
        method: None,
        params_canonical: None,
        result_canonical: None,
        error: None,
        orphan: false,
        raw: Some(String::from_utf8_lossy(body).into_owned()),
    };
    if body.iter().all(u8::is_ascii_whitespace) {
        return Vec::new();
    }
    match serde_json::from_slice::<Value>(body) {
        Ok(Value::Array(items)) if !items.is_empty() => items
            .iter()
            .map(|item| classify(server, from, ts, item, pending).unwrap_or_else(degraded))
            .collect(),
        Ok(value) => vec![classify(server, from, ts, &value, pending).unwrap_or_else(degraded)],
        Err(_) => vec![degraded()],
    }
}

fn classify(
    server: &str,
    from: Peer,
    ts: Timestamp,
    value: &Value,
    pending: &mut HashSet<(Peer, String)>,
) -> Option<RpcLogEntry> {
    let obj = value.as_object()?;
    let id = obj.get("id").filter(|v| !v.is_null()).cloned();
    let method = obj.get("method").and_then(Value::as_str).map(str::to_string);
    let mut entry = RpcLogEntry {
        ts,
        server: server.to_string(),
        direction: Direction::Notification,
        from,
        id: id.clone(),
        method: method.clone(),
        params_canonical: None,
        result_canonical: None,
        error: None,
        orphan: false,
        raw: None,
    };
    if method.is_some() {
        entry.params_canonical = obj.get("params").map(canonical_text);
        if let Some(id) = &id {
            entry.direction = Direction::Request;
            pending.insert((from, canonical_text(id)));
        }
        return Some(entry);
    }
    let result = obj.get("result");
    let error = obj.get("error");
    if result.is_none() && error.is_none() {
        return None;
    }
    entry.direction = Direction::Response;
    if let Some(err) = error {
        entry.error = Some(RpcError {
            code: err.get("code").and_then(Value::as_i64).unwrap_or(0),
            message: err
                .get("message")
                .and_then(Value::as_str)
                .unwrap_or_default()
                .to_string(),
        });
    } else {
        entry.result_canonical = result.map(canonical_text);
    }
    let requester = match from {
        Peer::Client => Peer::Server,
        Peer::Server => Peer::Client,
    };
    entry.orphan = match &id {
        Some(id) => !pending.remove(&(requester, canonical_text(id))),
        None => true,
    };
    Some(entry)
}
