//! `aer`: capture, validate, verify, replay and analyze agent execution records.

mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use output::Format;

#[derive(Debug, Parser)]
#[command(name = "aer", version, about = "Agent execution record toolkit")]
pub struct Cli {
    /// Store root (defaults to $AER_ROOT, then ./agent-executions).
    #[arg(long, global = true)]
    pub root: Option<PathBuf>,
    /// Output format; each command has its own default.
    #[arg(long, global = true, value_enum)]
    pub out: Option<Format>,
    /// Increase diagnostic output on stderr.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    /// Print the resolved configuration before running.
    #[arg(long, global = true)]
    pub show_config: bool,
    #[command(subcommand)]
    pub command: Option<Command>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Capture a record from a scripted scenario file.
    Record {
        #[arg(long)]
        scenario: PathBuf,
        /// Replace tool outputs larger than this with a size marker.
        #[arg(long)]
        max_output_bytes: Option<usize>,
    },
    /// Parse and validate a record by id or directory path.
    Validate { target: String },
    /// List records, newest first.
    List,
    /// Exempt a record from eviction.
    Pin { id: String },
    /// Make a record eligible for eviction again.
    Unpin { id: String },
    /// Copy a record to the promoted area with redaction applied.
    Promote {
        id: String,
        /// Field selector to redact, e.g. `steps.*.tool_calls.*.output`.
        #[arg(long = "redact")]
        redact: Vec<String>,
        #[arg(long)]
        dry_run: bool,
    },
    /// Apply the retention policy.
    Evict {
        /// Reference time (RFC 3339); defaults to now.
        #[arg(long)]
        now: Option<String>,
        #[arg(long)]
        max_unpinned: Option<usize>,
        #[arg(long)]
        max_age_days: Option<u32>,
        #[arg(long)]
        dry_run: bool,
    },
    /// Ground-truth interceptors.
    #[command(subcommand)]
    Intercept(InterceptCommand),
    /// Score a record's claimed tool calls against intercepted ground truth.
    Reconcile(ReconcileArgs),
    /// Narrate, mock-replay or live-replay records.
    Replay(ReplayArgs),
    /// Corpus analytics.
    #[command(subcommand)]
    Stats(StatsCommand),
    /// Answer a structured question about one record.
    Explain {
        id: String,
        #[arg(long, value_enum)]
        question: QuestionKind,
        /// Step sequence number for `--question intent`.
        #[arg(long)]
        step: Option<u32>,
    },
    /// Benchmarks.
    #[command(subcommand)]
    Bench(BenchCommand),
}

#[derive(Debug, Subcommand)]
pub enum InterceptCommand {
    /// Run a stdio JSON-RPC server behind a logging proxy.
    Rpc {
        #[arg(long)]
        name: String,
        #[arg(long)]
        log: PathBuf,
        #[arg(last = true, required = true)]
        argv: Vec<String>,
    },
    /// Print the shell trap script, or install it and print activation lines.
    ShellEnv {
        /// Write the script here instead of printing it.
        #[arg(long)]
        install: Option<PathBuf>,
        /// Shell log path for the printed activation lines.
        #[arg(long, requires = "install")]
        log: Option<PathBuf>,
    },
    /// Watch directories and log create/modify/delete events until interrupted.
    Fs {
        #[arg(long = "watch", required = true)]
        watch: Vec<PathBuf>,
        #[arg(long)]
        log: PathBuf,
        #[arg(long, default_value_t = 50)]
        debounce_ms: u64,
        /// Use the polling backend.
        #[arg(long)]
        poll: bool,
        /// Stop after this many milliseconds instead of waiting for a signal.
        #[arg(long)]
        for_ms: Option<u64>,
    },
    /// Check that a log directory is not writable by the agent's uid.
    CheckPerms {
        dir: PathBuf,
        #[arg(long)]
        agent_uid: u32,
    },
    /// Minimal JSON-RPC server answering every request with its params.
    #[command(hide = true)]
    RpcEcho {
        #[arg(long, default_value_t = 0)]
        exit_code: u8,
    },
}

#[derive(Debug, Args)]
pub struct ReconcileArgs {
    pub id: String,
    #[arg(long)]
    pub intercept_dir: PathBuf,
    /// JSON noise filter file replacing the default filter.
    #[arg(long)]
    pub noise_denylist: Option<PathBuf>,
    /// Additional shell binaries to ignore.
    #[arg(long = "shell-deny")]
    pub shell_deny: Vec<String>,
    /// Additional JSON-RPC methods to ignore.
    #[arg(long = "rpc-deny")]
    pub rpc_deny: Vec<String>,
    /// Keep every intercepted call.
    #[arg(long, conflicts_with_all = ["noise_denylist", "shell_deny", "rpc_deny"])]
    pub no_noise_filter: bool,
    #[arg(long)]
    pub dry_run: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Narrate,
    Mock,
    Live,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ExecutorArg {
    Unavailable,
    Recorded,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    /// Investigation ids.
    pub ids: Vec<String>,
    #[arg(long, value_enum)]
    pub mode: ModeArg,
    /// `echo`, `scripted:<file>` or `http:<url>`.
    #[arg(long, default_value = "echo")]
    pub backend: String,
    #[arg(long, value_enum, default_value = "unavailable")]
    pub executor: ExecutorArg,
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub prompt_version: Option<String>,
    #[arg(long)]
    pub comparator_config: Option<PathBuf>,
    /// Add every pinned record to the batch.
    #[arg(long)]
    pub pinned: bool,
    /// Do not write reports under `replays/`.
    #[arg(long)]
    pub no_save: bool,
}

#[derive(Debug, Subcommand)]
pub enum StatsCommand {
    /// Share of records whose step N triggered a plan revision.
    ReplanRate {
        #[arg(long)]
        after_step: u32,
        #[arg(long)]
        table: bool,
    },
    /// Expert agreement by confidence bucket.
    Calibration {
        #[arg(long)]
        labels: PathBuf,
        #[arg(long, default_value_t = 0.1)]
        width: f64,
        #[arg(long)]
        table: bool,
    },
    /// Most frequent tool n-grams along evidence chains.
    Patterns {
        #[arg(long, default_value_t = 2)]
        n: usize,
        /// Predicate (JSON, or `@file`) restricting the records scanned.
        #[arg(long = "where")]
        filter: Option<String>,
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long)]
        table: bool,
    },
    /// Aggregate divergence statistics over saved replay reports.
    ReplayBatch {
        /// Directory of reports; defaults to the store's replays area.
        dir: Option<PathBuf>,
        #[arg(long)]
        table: bool,
    },
    /// Run a JSON query (inline, or `@file`).
    Query {
        query: String,
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long)]
        table: bool,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum QuestionKind {
    Intent,
    PlanChange,
    Evidence,
    Authority,
    Context,
}

#[derive(Debug, Subcommand)]
pub enum BenchCommand {
    /// Cumulative-checkpoint versus record storage.
    Storage {
        #[arg(long, default_value_t = 10)]
        steps: usize,
        /// JSON generator parameters overriding the defaults.
        #[arg(long)]
        params: Option<PathBuf>,
        /// Also fit size exponents over 5, 10, 20 and 40 steps.
        #[arg(long)]
        scaling: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    ExitCode::from(commands::run(cli))
}
