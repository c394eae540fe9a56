use std::collections::HashMap;
use std::fs;
use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use aer_core::analytics::{
    confidence_calibration, eval_predicate, explain, fit_exponent, mine_evidence_patterns,
    read_labels, record_document, replan_rate, replay_divergence_stats, run_query, storage_bench,
    AnalyticsError, BenchParams, Corpus, ExpertLabel, Predicate, Query, Question,
};
use aer_core::codes::Code;
use aer_core::intercept::{
    check_log_permissions, run_stdio_proxy, shell_trap_script, FsWatcher, FsWatcherOptions,
    SHELL_LOG_ENV,
};
use aer_core::reconcile::{reconcile, AlignOptions, NoiseFilter, ReconcileError};
use aer_core::record::{
    parse_record, validate_record, ExecutionRecord, ParseError, Timestamp, Violation,
};
use aer_core::replay::{
    batch_mock_replay, narrate, render_report, save_report, BatchEntry, ComparatorConfig,
    EchoBackend, HttpBackend, JaccardComparator, ReasonerBackend, RecordedExecutor, ReplayError,
    ReplayReport, Replayer, ScriptedBackend, ToolExecutor, UnavailableExecutor,
};
use aer_core::store::{
    evict, list_records, pin, promote, run_scenario, unpin, FieldSelector, Scenario, StoreConfig,
    StoreError,
};
use anyhow::{anyhow, Context as _};
use serde::Serialize;
use serde_json::{json, Value};

use crate::output::{self, fmt_opt, kv_rows, table, Format};
use crate::{
    BenchCommand, Cli, Command, ExecutorArg, InterceptCommand, ModeArg, QuestionKind,
    ReconcileArgs, ReplayArgs, StatsCommand,
};

const EXIT_OK: u8 = 0;
const EXIT_FAILURE: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_INVALID: u8 = 3;

enum Failure {
    Usage(String),
    Operational(anyhow::Error),
    /// Data failed validation; the violations go to stdout.
    Invalid {
        message: String,
        violations: Vec<Violation>,
    },
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Operational(e)
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Operational(e.into())
    }
}

impl From<StoreError> for Failure {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::Invalid(ref v) | StoreError::RecordInvalid(ref v) => Failure::Invalid {
                message: e.to_string(),
                violations: v.clone(),
            },
            StoreError::RedactionBreaksSchema(_) => Failure::Invalid {
                message: e.to_string(),
                violations: Vec::new(),
            },
            StoreError::SelectorInvalid(_) => Failure::Usage(e.to_string()),
            other => Failure::Operational(anyhow!("{}: {other}", other.code())),
        }
    }
}

impl From<ReconcileError> for Failure {
    fn from(e: ReconcileError) -> Self {
        match e {
            ReconcileError::Invalid(violations) => Failure::Invalid {
                message: "record is invalid; refusing to reconcile".into(),
                violations,
            },
            other => Failure::Operational(other.into()),
        }
    }
}

impl From<ReplayError> for Failure {
    fn from(e: ReplayError) -> Self {
        match e {
            ReplayError::Invalid(violations) => Failure::Invalid {
                message: "record is invalid; refusing to replay".into(),
                violations,
            },
            ReplayError::Store(s) => s.into(),
            other => Failure::Operational(other.into()),
        }
    }
}

impl From<AnalyticsError> for Failure {
    fn from(e: AnalyticsError) -> Self {
        match e {
            AnalyticsError::BucketWidth(_) | AnalyticsError::NgramLength | AnalyticsError::Query(_) => {
                Failure::Usage(e.to_string())
            }
            other => Failure::Operational(other.into()),
        }
    }
}

type CmdResult = Result<u8, Failure>;

struct Ctx {
    config: StoreConfig,
    out: Option<Format>,
    verbose: u8,
}

impl Ctx {
    fn format(&self, default: Format) -> Format {
        self.out.unwrap_or(default)
    }

    fn log(&self, message: impl AsRef<str>) {
        if self.verbose > 0 {
            eprintln!("aer: {}", message.as_ref());
        }
    }

    /// Prints `value` as canonical JSON, or `text` (pretty JSON when absent)
    /// in text mode.
    fn emit<T: Serialize>(&self, default: Format, value: &T, text: Option<String>) -> Result<(), Failure> {
        let rendered = match self.format(default) {
            Format::Json => output::json(value)?,
            Format::Text => match text {
                Some(t) => t.trim_end().to_string(),
                None => output::pretty(value)?,
            },
        };
        output::println(&rendered);
        Ok(())
    }

    fn load_record(&self, id: &str) -> Result<ExecutionRecord, Failure> {
        let dir = self.config.existing_record_dir(id)?;
        parse_record(&dir).map_err(|e| Failure::Operational(e.into()))
    }
}

pub fn run(cli: Cli) -> u8 {
    let root = StoreConfig::resolve_root(cli.root.as_deref());
    let ctx = Ctx {
        config: StoreConfig::new(root),
        out: cli.out,
        verbose: cli.verbose,
    };
    if cli.show_config {
        let shown = json!({
            "root": ctx.config.root.display().to_string(),
            "output": ctx.out,
            "verbosity": ctx.verbose,
        });
        match output::json(&shown) {
            Ok(text) if cli.command.is_none() => output::println(&text),
            Ok(text) => eprintln!("{text}"),
            Err(e) => eprintln!("aer: {e}"),
        }
    }
    let Some(command) = cli.command else {
        if cli.show_config {
            return EXIT_OK;
        }
        eprintln!("aer: no command given (see --help)");
        return EXIT_USAGE;
    };
    match dispatch(&ctx, command) {
        Ok(code) => code,
        Err(Failure::Usage(message)) => {
            eprintln!("aer: {message}");
            EXIT_USAGE
        }
        Err(Failure::Operational(e)) => {
            eprintln!("aer: {e:#}");
            EXIT_FAILURE
        }
        Err(Failure::Invalid { message, violations }) => {
            eprintln!("aer: {message}");
            if !violations.is_empty() {
                if let Ok(text) = output::json(&json!({"violations": violations})) {
                    output::println(&text);
                }
            }
            EXIT_INVALID
        }
    }
}

fn dispatch(ctx: &Ctx, command: Command) -> CmdResult {
    match command {
        Command::Record {
            scenario,
            max_output_bytes,
        } => cmd_record(ctx, &scenario, max_output_bytes),
        Command::Validate { target } => cmd_validate(ctx, &target),
        Command::List => cmd_list(ctx),
        Command::Pin { id } => {
            let metadata = pin(&ctx.config, &id)?;
            ctx.emit(Format::Json, &json!({"investigation_id": id, "pinned": metadata.pinned}), None)?;
            Ok(EXIT_OK)
        }
        Command::Unpin { id } => {
            let metadata = unpin(&ctx.config, &id)?;
            ctx.emit(Format::Json, &json!({"investigation_id": id, "pinned": metadata.pinned}), None)?;
            Ok(EXIT_OK)
        }
        Command::Promote { id, redact, dry_run } => cmd_promote(ctx, &id, &redact, dry_run),
        Command::Evict {
            now,
            max_unpinned,
            max_age_days,
            dry_run,
        } => cmd_evict(ctx, now.as_deref(), max_unpinned, max_age_days, dry_run),
        Command::Intercept(sub) => cmd_intercept(ctx, sub),
        Command::Reconcile(args) => cmd_reconcile(ctx, args),
        Command::Replay(args) => cmd_replay(ctx, args),
        Command::Stats(sub) => cmd_stats(ctx, sub),
        Command::Explain { id, question, step } => cmd_explain(ctx, &id, question, step),
        Command::Bench(BenchCommand::Storage {
            steps,
            params,
            scaling,
        }) => cmd_bench(ctx, steps, params.as_deref(), scaling),
    }
}

fn cmd_record(ctx: &Ctx, path: &Path, max_output_bytes: Option<usize>) -> CmdResult {
    let scenario = Scenario::from_file(path).map_err(|e| match e {
        StoreError::Parse(p) => Failure::Usage(format!("scenario {}: {p}", path.display())),
        other => other.into(),
    })?;
    let mut config = ctx.config.clone();
    config.max_output_bytes = max_output_bytes;
    let id = scenario.envelope.investigation_id.as_str().to_string();
    ctx.log(format!("recording {id} into {}", config.record_dir(&id).display()));
    let metadata = run_scenario(&config, &scenario)?;
    let value = json!({
        "investigation_id": id,
        "path": config.record_dir(&id).display().to_string(),
        "metadata": metadata,
    });
    ctx.emit(Format::Json, &value, None)?;
    Ok(EXIT_OK)
}

fn parse_violation(e: &ParseError) -> Violation {
    Violation::new(
        Code::ParseError,
        e.file().unwrap_or(""),
        e.line().unwrap_or(0),
        "",
        e.to_string(),
    )
}

fn cmd_validate(ctx: &Ctx, target: &str) -> CmdResult {
    let as_path = PathBuf::from(target);
    let dir = if as_path.is_dir() {
        as_path
    } else {
        let dir = ctx.config.record_dir(target);
        if !dir.is_dir() {
            return Err(Failure::Operational(anyhow!("NOT_FOUND: no record {target}")));
        }
        dir
    };
    let id = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| target.to_string());
    let violations = match parse_record(&dir) {
        Ok(record) => validate_record(&record),
        Err(ParseError::Io { path, source }) if source.kind() != io::ErrorKind::NotFound => {
            return Err(Failure::Operational(anyhow!("{}: {source}", path.display())));
        }
        Err(e) => vec![parse_violation(&e)],
    };
    let text = if violations.is_empty() {
        format!("{id}: valid")
    } else {
        let mut t = format!("{id}: {} violation(s)\n", violations.len());
        for v in &violations {
            t.push_str(&format!("  {} {} {}: {}\n", v.code, v.file, v.locator, v.message));
        }
        t
    };
    ctx.emit(
        Format::Json,
        &json!({"investigation_id": id, "violations": violations}),
        Some(text),
    )?;
    Ok(if violations.is_empty() { EXIT_OK } else { EXIT_INVALID })
}

fn cmd_list(ctx: &Ctx) -> CmdResult {
    let records = list_records(&ctx.config)?;
    let rows: Vec<Vec<String>> = records
        .iter()
        .map(|r| {
            vec![
                r.investigation_id.clone(),
                r.created_at.map_or_else(|| "-".into(), |t| t.to_string()),
                r.pinned.to_string(),
                r.promoted.to_string(),
                r.has_verdict.to_string(),
                fmt_opt(r.fidelity),
                r.degraded.clone().unwrap_or_default(),
            ]
        })
        .collect();
    let text = table(
        &["id", "created_at", "pinned", "promoted", "verdict", "fidelity", "note"],
        &rows,
    );
    ctx.emit(Format::Json, &records, Some(text))?;
    Ok(EXIT_OK)
}

fn cmd_promote(ctx: &Ctx, id: &str, redact: &[String], dry_run: bool) -> CmdResult {
    let mut config = ctx.config.clone();
    for selector in redact {
        config.redaction_rules.push(FieldSelector::parse(selector)?);
    }
    let promotion = promote(&config, id, dry_run)?;
    ctx.emit(Format::Json, &promotion, None)?;
    Ok(EXIT_OK)
}

fn cmd_evict(
    ctx: &Ctx,
    now: Option<&str>,
    max_unpinned: Option<usize>,
    max_age_days: Option<u32>,
    dry_run: bool,
) -> CmdResult {
    let now = match now {
        Some(s) => s
            .parse::<Timestamp>()
            .map_err(|e| Failure::Usage(format!("--now {s:?}: {e}")))?,
        None => Timestamp::now(),
    };
    let mut config = ctx.config.clone();
    if let Some(n) = max_unpinned {
        config.max_unpinned = n;
    }
    if let Some(d) = max_age_days {
        config.max_age_days = d;
    }
    let plan = evict(&config, now, dry_run)?;
    let reason = |r| serde_json::to_value(r).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
    let mut rows: Vec<Vec<String>> = plan
        .removed
        .iter()
        .map(|e| vec![e.investigation_id.clone(), "remove".into(), reason(e.reason)])
        .collect();
    rows.extend(plan.kept.iter().map(|e| vec![e.investigation_id.clone(), "keep".into(), reason(e.reason)]));
    let text = table(&["id", "action", "reason"], &rows);
    ctx.emit(Format::Json, &plan, Some(text))?;
    Ok(EXIT_OK)
}

fn cmd_intercept(ctx: &Ctx, command: InterceptCommand) -> CmdResult {
    match command {
        InterceptCommand::Rpc { name, log, argv } => {
            ctx.log(format!("proxying {} as {name}, log {}", argv.join(" "), log.display()));
            let outcome = run_stdio_proxy(&argv, &log, &name).map_err(|e| Failure::Operational(e.into()))?;
            ctx.log(format!("{} entries logged", outcome.entries_logged));
            Ok(u8::try_from(outcome.exit_code).unwrap_or(EXIT_FAILURE))
        }
        InterceptCommand::ShellEnv { install, log } => {
            let Some(path) = install else {
                output::print(shell_trap_script());
                return Ok(EXIT_OK);
            };
            fs::write(&path, shell_trap_script()).with_context(|| format!("writing {}", path.display()))?;
            output::println(&format!("export BASH_ENV={}", path.display()));
            if let Some(log) = log {
                output::println(&format!("export {SHELL_LOG_ENV}={}", log.display()));
            }
            Ok(EXIT_OK)
        }
        InterceptCommand::Fs {
            watch,
            log,
            debounce_ms,
            poll,
            for_ms,
        } => {
            let opts = FsWatcherOptions {
                debounce: Duration::from_millis(debounce_ms),
                force_poll: poll,
                ..FsWatcherOptions::default()
            };
            let stop = Arc::new(AtomicBool::new(false));
            for signal in [signal_hook::consts::SIGINT, signal_hook::consts::SIGTERM] {
                signal_hook::flag::register(signal, stop.clone()).context("installing signal handler")?;
            }
            let watcher = FsWatcher::start(&watch, &log, opts).map_err(|e| Failure::Operational(e.into()))?;
            let mode = watcher.mode();
            ctx.log(format!("watching {} dir(s) in {mode:?} mode", watch.len()));
            let deadline = for_ms.map(|ms| Instant::now() + Duration::from_millis(ms));
            while !stop.load(Ordering::Relaxed) && deadline.is_none_or(|d| Instant::now() < d) {
                std::thread::sleep(Duration::from_millis(20));
            }
            let written = watcher.stop()?;
            let mode = format!("{mode:?}").to_lowercase();
            ctx.emit(Format::Json, &json!({"entries_written": written, "mode": mode}), None)?;
            Ok(EXIT_OK)
        }
        InterceptCommand::CheckPerms { dir, agent_uid } => {
            let report = check_log_permissions(&dir, agent_uid)?;
            ctx.emit(Format::Json, &report, None)?;
            Ok(if report.ok() { EXIT_OK } else { EXIT_INVALID })
        }
        InterceptCommand::RpcEcho { exit_code } => {
            rpc_echo()?;
            Ok(exit_code)
        }
    }
}

/// Answers each request line with `{"jsonrpc","id","result":params}` and
/// ignores notifications and non-JSON lines.
fn rpc_echo() -> io::Result<()> {
    let stdin = io::stdin();
    let mut stdout = io::BufWriter::new(io::stdout().lock());
    let mut line = Vec::new();
    let mut reader = stdin.lock();
    loop {
        line.clear();
        if reader.read_until(b'\n', &mut line)? == 0 {
            break;
        }
        let Ok(message) = serde_json::from_slice::<Value>(&line) else {
            continue;
        };
        let Some(id) = message.get("id").filter(|_| message.get("method").is_some()) else {
            continue;
        };
        let params = message.get("params").cloned().unwrap_or(Value::Null);
        let reply = json!({"jsonrpc": "2.0", "id": id, "result": params});
        serde_json::to_writer(&mut stdout, &reply)?;
        stdout.write_all(b"\n")?;
        stdout.flush()?;
    }
    Ok(())
}

fn cmd_reconcile(ctx: &Ctx, args: ReconcileArgs) -> CmdResult {
    let dir = ctx.config.existing_record_dir(&args.id)?;
    let mut opts = AlignOptions::default();
    if args.no_noise_filter {
        opts.noise_filter = NoiseFilter::none();
    } else if let Some(path) = &args.noise_denylist {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        opts.noise_filter = serde_json::from_str(&text)
            .map_err(|e| Failure::Usage(format!("noise filter {}: {e}", path.display())))?;
    }
    opts.noise_filter.shell_denylist.extend(args.shell_deny);
    opts.noise_filter.rpc_method_denylist.extend(args.rpc_deny);
    let report = reconcile(&dir, &args.intercept_dir, &opts, args.dry_run)?;
    if report.ground_truth_absent {
        eprintln!("aer: no interceptor logs found in {}", args.intercept_dir.display());
    }
    let mut rows: Vec<Vec<String>> = vec![vec!["score".into(), format!("{:.4}", report.score)]];
    rows.extend(report.rates().iter().skip(1).map(|(k, v)| vec![k.to_string(), format!("{v:.4}")]));
    rows.push(vec!["claims".into(), report.claims_total.to_string()]);
    rows.push(vec!["ground".into(), report.ground_total.to_string()]);
    let text = table(&["metric", "value"], &rows);
    ctx.emit(Format::Json, &report, Some(text))?;
    Ok(EXIT_OK)
}

enum BackendChoice {
    Echo,
    Scripted(ScriptedBackend),
    Http(HttpBackend),
}

fn parse_backend(spec: &str) -> Result<BackendChoice, Failure> {
    if spec == "echo" {
        return Ok(BackendChoice::Echo);
    }
    if let Some(path) = spec.strip_prefix("scripted:") {
        return ScriptedBackend::from_file(Path::new(path))
            .map(BackendChoice::Scripted)
            .map_err(|e| Failure::Usage(format!("backend {spec}: {e}")));
    }
    if let Some(url) = spec.strip_prefix("http:") {
        let url = if url.starts_with("//") { format!("http:{url}") } else { url.to_string() };
        return Ok(BackendChoice::Http(HttpBackend::new(url)));
    }
    Err(Failure::Usage(format!(
        "unknown backend {spec:?}; expected echo, scripted:<file> or http:<url>"
    )))
}

fn cmd_replay(ctx: &Ctx, args: ReplayArgs) -> CmdResult {
    let mut ids = args.ids.clone();
    if args.pinned {
        for summary in list_records(&ctx.config)? {
            if summary.pinned && !ids.contains(&summary.investigation_id) {
                ids.push(summary.investigation_id);
            }
        }
    }
    if ids.is_empty() {
        return Err(Failure::Usage("no investigation ids given".into()));
    }

    if args.mode == ModeArg::Narrate {
        let mut texts = Vec::new();
        let mut values = Vec::new();
        for id in &ids {
            let record = ctx.load_record(id)?;
            let text = narrate(&record);
            values.push(json!({"investigation_id": id, "narrative": text}));
            texts.push(text);
        }
        let value = if values.len() == 1 { values.remove(0) } else { Value::Array(values) };
        ctx.emit(Format::Text, &value, Some(texts.join("\n")))?;
        return Ok(EXIT_OK);
    }

    let comparator_config = match &args.comparator_config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str::<ComparatorConfig>(&text)
                .map_err(|e| Failure::Usage(format!("comparator config {}: {e}", path.display())))?
        }
        None => ComparatorConfig::default(),
    };
    let comparator = JaccardComparator::new(comparator_config);
    let choice = parse_backend(&args.backend)?;
    let echo;
    let backend: &dyn ReasonerBackend = match &choice {
        BackendChoice::Echo => {
            let records = ids
                .iter()
                .filter_map(|id| ctx.load_record(id).ok())
                .collect::<Vec<_>>();
            echo = EchoBackend::from_records(&records);
            &echo
        }
        BackendChoice::Scripted(b) => b,
        BackendChoice::Http(b) => b,
    };
    let mut replayer = Replayer::new(backend, &comparator);
    replayer.model = args.model.clone();
    replayer.prompt_version = args.prompt_version.clone();

    let entries: Vec<BatchEntry> = match args.mode {
        ModeArg::Mock => batch_mock_replay(&ctx.config, &ids, &replayer),
        ModeArg::Live => {
            let mut entries = Vec::new();
            for id in &ids {
                let record = ctx.load_record(id)?;
                let recorded;
                let executor: &dyn ToolExecutor = match args.executor {
                    ExecutorArg::Unavailable => &UnavailableExecutor,
                    ExecutorArg::Recorded => {
                        recorded = RecordedExecutor::from_record(&record);
                        &recorded
                    }
                };
                let mut live = Replayer::new(backend, &comparator);
                live.executor = executor;
                live.model = args.model.clone();
                live.prompt_version = args.prompt_version.clone();
                entries.push(match live.live(&record) {
                    Ok(report) => BatchEntry::Report(report),
                    Err(e) => BatchEntry::Error {
                        investigation_id: id.clone(),
                        message: e.to_string(),
                    },
                });
            }
            entries
        }
        ModeArg::Narrate => unreachable!("handled above"),
    };

    if ids.len() == 1 {
        let entry = entries.into_iter().next().expect("one entry per id");
        let report = match entry {
            BatchEntry::Report(r) => r,
            BatchEntry::Error { .. } => {
                // Re-run for a typed error so invalid records map to exit 3.
                let record = ctx.load_record(&ids[0])?;
                return Err(match args.mode {
                    ModeArg::Live => replayer.live(&record).err(),
                    _ => replayer.mock(&record).err(),
                }
                .map(Failure::from)
                .unwrap_or_else(|| Failure::Operational(anyhow!("replay failed"))));
            }
        };
        save(ctx, &args, &report)?;
        ctx.emit(Format::Text, &report, Some(render_report(&report)))?;
        return Ok(EXIT_OK);
    }

    let mut failed = false;
    let mut texts = Vec::new();
    for entry in &entries {
        match entry {
            BatchEntry::Report(report) => {
                save(ctx, &args, report)?;
                texts.push(render_report(report));
            }
            BatchEntry::Error {
                investigation_id,
                message,
            } => {
                failed = true;
                texts.push(format!("{investigation_id}: error: {message}\n"));
            }
        }
    }
    ctx.emit(Format::Text, &entries, Some(texts.join("\n")))?;
    Ok(if failed { EXIT_FAILURE } else { EXIT_OK })
}

fn save(ctx: &Ctx, args: &ReplayArgs, report: &ReplayReport) -> Result<(), Failure> {
    if args.no_save {
        return Ok(());
    }
    let path = save_report(&ctx.config, report)?;
    ctx.log(format!("report saved to {}", path.display()));
    Ok(())
}

fn load_corpus(ctx: &Ctx) -> Result<Corpus, Failure> {
    let corpus = Corpus::load(&ctx.config)?;
    for ex in &corpus.excluded {
        ctx.log(format!("excluded {}: {}", ex.investigation_id, ex.reason));
    }
    Ok(corpus)
}

fn labels_from(path: &Path) -> Result<Vec<ExpertLabel>, Failure> {
    read_labels(path).map_err(|e| Failure::Usage(format!("labels {}: {e}", path.display())))
}

fn label_lookup(labels: &[ExpertLabel]) -> HashMap<String, bool> {
    labels
        .iter()
        .map(|l| (l.investigation_id.clone(), l.expert_agrees))
        .collect()
}

/// Inline JSON, or the contents of a file given as `@path`.
fn inline_or_file(arg: &str) -> Result<String, Failure> {
    match arg.strip_prefix('@') {
        Some(path) => Ok(fs::read_to_string(path).with_context(|| format!("reading {path}"))?),
        None => Ok(arg.to_string()),
    }
}

fn render(ctx: &Ctx, value: &Value, table_flag: bool, text: impl FnOnce() -> String) -> CmdResult {
    if table_flag {
        output::println(text().trim_end());
    } else {
        ctx.emit(Format::Json, value, None)?;
    }
    Ok(EXIT_OK)
}

fn cmd_stats(ctx: &Ctx, command: StatsCommand) -> CmdResult {
    match command {
        StatsCommand::ReplanRate { after_step, table: t } => {
            let corpus = load_corpus(ctx)?;
            let rate = replan_rate(&corpus, after_step);
            let value = json!({
                "after_step": after_step,
                "rate": rate,
                "records": corpus.len(),
                "excluded": corpus.excluded.len(),
            });
            render(ctx, &value, t, || table(&["metric", "value"], &kv_rows(&value)))
        }
        StatsCommand::Calibration { labels, width, table: t } => {
            let corpus = load_corpus(ctx)?;
            let labels = labels_from(&labels)?;
            let calibration = confidence_calibration(&corpus, &labels, width)?;
            let value = serde_json::to_value(&calibration).map_err(anyhow::Error::from)?;
            render(ctx, &value, t, || {
                let rows: Vec<Vec<String>> = calibration
                    .buckets
                    .iter()
                    .map(|b| {
                        vec![
                            format!("[{:.2}, {:.2}{}", b.lo, b.hi, if b.hi >= 1.0 { "]" } else { ")" }),
                            b.n.to_string(),
                            fmt_opt(b.agreement_rate),
                        ]
                    })
                    .collect();
                table(&["bucket", "n", "agreement"], &rows)
            })
        }
        StatsCommand::Patterns {
            n,
            filter,
            labels,
            table: t,
        } => {
            let corpus = load_corpus(ctx)?;
            let lookup = match &labels {
                Some(path) => Some(label_lookup(&labels_from(path)?)),
                None => None,
            };
            let predicate: Option<Predicate> = match &filter {
                Some(expr) => Some(
                    serde_json::from_str(&inline_or_file(expr)?)
                        .map_err(|e| Failure::Usage(format!("--where: {e}")))?,
                ),
                None => None,
            };
            let keep = |record: &ExecutionRecord| {
                let label = lookup.as_ref().and_then(|l| l.get(record.id().as_str()).copied());
                predicate
                    .as_ref()
                    .is_none_or(|p| eval_predicate(&record_document(record, label), p))
            };
            let report = mine_evidence_patterns(&corpus, n, predicate.is_some().then_some(&keep as &dyn Fn(&ExecutionRecord) -> bool))?;
            let value = serde_json::to_value(&report).map_err(anyhow::Error::from)?;
            render(ctx, &value, t, || {
                let rows: Vec<Vec<String>> = report
                    .patterns
                    .iter()
                    .map(|p| vec![p.tool_sequence.join(" -> "), p.count.to_string()])
                    .collect();
                table(&["pattern", "count"], &rows)
            })
        }
        StatsCommand::ReplayBatch { dir, table: t } => {
            let dir = dir.unwrap_or_else(|| ctx.config.root.join(aer_core::store::REPLAYS_DIR));
            let reports = read_reports(&dir)?;
            let stats = replay_divergence_stats(&reports)?;
            let value = serde_json::to_value(&stats).map_err(anyhow::Error::from)?;
            render(ctx, &value, t, || table(&["metric", "value"], &kv_rows(&value)))
        }
        StatsCommand::Query { query, labels, table: t } => {
            let corpus = load_corpus(ctx)?;
            let query = Query::parse(&inline_or_file(&query)?)?;
            let lookup = match &labels {
                Some(path) => Some(label_lookup(&labels_from(path)?)),
                None => None,
            };
            let result = run_query(&corpus, &query, lookup.as_ref());
            let value = serde_json::to_value(&result).map_err(anyhow::Error::from)?;
            render(ctx, &value, t, || {
                let mut rows = vec![
                    vec!["total".to_string(), result.total.to_string()],
                    vec!["matched".to_string(), result.matched.to_string()],
                    vec!["value".to_string(), result.value.to_string()],
                ];
                for (k, v) in result.groups.iter().flatten() {
                    rows.push(vec![format!("group {k}"), v.to_string()]);
                }
                table(&["key", "value"], &rows)
            })
        }
    }
}

/// Every `*.json` report below `dir`, in path order. Unreadable files are skipped.
fn read_reports(dir: &Path) -> Result<Vec<ReplayReport>, Failure> {
    let mut paths = Vec::new();
    let mut pending = vec![dir.to_path_buf()];
    while let Some(d) = pending.pop() {
        let entries = fs::read_dir(&d).with_context(|| format!("reading {}", d.display()))?;
        for entry in entries {
            let path = entry?.path();
            if path.is_dir() {
                pending.push(path);
            } else if path.extension().is_some_and(|e| e == "json") {
                paths.push(path);
            }
        }
    }
    paths.sort();
    let mut reports = Vec::new();
    for path in paths {
        let parsed = fs::read_to_string(&path)
            .map_err(anyhow::Error::from)
            .and_then(|t| Ok(serde_json::from_str::<ReplayReport>(&t)?));
        match parsed {
            Ok(r) => reports.push(r),
            Err(e) => eprintln!("aer: skipping {}: {e}", path.display()),
        }
    }
    Ok(reports)
}

fn cmd_explain(ctx: &Ctx, id: &str, kind: QuestionKind, step: Option<u32>) -> CmdResult {
    let question = match kind {
        QuestionKind::Intent => Question::IntentOfStep(
            step.ok_or_else(|| Failure::Usage("--question intent requires --step".into()))?,
        ),
        QuestionKind::PlanChange => Question::PlanChange,
        QuestionKind::Evidence => Question::Evidence,
        QuestionKind::Authority => Question::Authority,
        QuestionKind::Context => Question::ContextSeen,
    };
    let record = ctx.load_record(id)?;
    let answer = explain(&record, question)?;
    ctx.emit(Format::Json, &answer, None)?;
    Ok(EXIT_OK)
}

fn cmd_bench(ctx: &Ctx, steps: usize, params: Option<&Path>, scaling: bool) -> CmdResult {
    let params: BenchParams = match params {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("params {}: {e}", path.display())))?
        }
        None => BenchParams::default(),
    };
    let result = storage_bench(&params, steps);
    let mut value = json!({"params": params, "result": result});
    if scaling {
        let runs: Vec<_> = [5usize, 10, 20, 40].iter().map(|&k| storage_bench(&params, k)).collect();
        let checkpoint: Vec<(f64, f64)> = runs.iter().map(|r| (r.steps as f64, r.checkpoint_total_bytes as f64)).collect();
        let aer: Vec<(f64, f64)> = runs.iter().map(|r| (r.steps as f64, r.aer_bytes_with_raw as f64)).collect();
        value["scaling"] = json!({
            "runs": runs,
            "checkpoint_exponent": fit_exponent(&checkpoint),
            "aer_exponent": fit_exponent(&aer),
        });
    }
    let text = format!(
        "steps: {}\ncheckpoint total: {} bytes\nrecord (with raw outputs): {} bytes\nrecord (without raw outputs): {} bytes\nratio: {:.1}x ({:.1}x without raw)",
        result.steps,
        result.checkpoint_total_bytes,
        result.aer_bytes_with_raw,
        result.aer_bytes_without_raw,
        result.ratio,
        result.ratio_without_raw,
    );
    ctx.emit(Format::Json, &value, Some(text))?;
    Ok(EXIT_OK)
}
