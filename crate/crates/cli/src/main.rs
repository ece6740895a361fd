//! `amplify`: generate synthetic incidents, backtest, score and stream edge files.
//!
//! Every failure prints exactly one line to stderr,
//! `amplify-error: <kind>: <message>`, and exits nonzero (2 for usage
//! errors, 3 for failed backtest bounds, 1 otherwise).

mod config;

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use amplify_core::amplifier::{self, Signal};
use amplify_core::backtest::{self, BacktestConfig, BacktestReport};
use amplify_core::detector::{self, attach_users, flag_nodes, Alert};
use amplify_core::scenario::{self, presets, ScenarioConfig};
use amplify_core::{io, Engine, Error, SignalRegistry, TransactionEdge, WindowConfig};
use clap::{Args, Parser, Subcommand};

use config::{Bounds, RunConfig};

const DEFAULT_THRESHOLD: f64 = 40.0;

#[derive(Debug)]
pub struct Failure {
    kind: &'static str,
    message: String,
}

impl Failure {
    pub fn new(kind: &'static str, message: impl Into<String>) -> Self {
        Failure {
            kind,
            message: message.into(),
        }
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        Failure::new("io", format!("{}: {e}", path.display()))
    }

    fn core(context: &Path, e: Error) -> Self {
        let kind = match &e {
            Error::Malformed { .. } | Error::Csv(_) | Error::Json(_) | Error::Unsorted { .. } => "input",
            Error::Io(_) => "io",
            Error::UnknownSignal(_) | Error::NoBaseline(_) | Error::DegenerateBaseline { .. } => "signal",
            Error::InvalidConfig(_) | Error::UnsortedThresholds => "config",
            Error::CheckpointVersion(_) => "checkpoint",
            _ => "engine",
        };
        Failure::new(kind, format!("{}: {e}", context.display()))
    }

    fn exit_code(&self) -> u8 {
        match self.kind {
            "usage" => 2,
            "bound" => 3,
            _ => 1,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let one_line = self.message.split_whitespace().collect::<Vec<_>>().join(" ");
        write!(f, "amplify-error: {}: {one_line}", self.kind)
    }
}

type Result<T> = std::result::Result<T, Failure>;

#[derive(Parser)]
#[command(
    name = "amplify",
    version,
    about = "Weak-signal structural amplification for fraud detection"
)]
struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic incident: edges.csv, truth.json, scenario.json.
    Generate(GenerateArgs),
    /// Daily replay plus threshold sweep against ground truth.
    Backtest(BacktestArgs),
    /// Rank nodes of the final window by z-score.
    Score(ScoreArgs),
    /// Incremental ingest with checkpoint and resume.
    Stream(StreamArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// One of case1-desk, case2-desk, calm.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Existing output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DetectArgs {
    /// `cumulative` or `trailing:<days>`.
    #[arg(long)]
    window: Option<String>,
    /// Alert threshold on z.
    #[arg(long)]
    threshold: Option<f64>,
}

#[derive(Args)]
struct BacktestArgs {
    #[arg(long)]
    edges: PathBuf,
    #[arg(long)]
    truth: PathBuf,
    /// Existing output directory.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    detect: DetectArgs,
    /// Sweep thresholds, comma-separated, ascending.
    #[arg(long, value_delimiter = ',')]
    thresholds: Option<Vec<f64>>,
    /// Signal the bounds apply to (default: first signal in the edge file).
    #[arg(long)]
    bound_signal: Option<String>,
    #[arg(long)]
    min_precision: Option<f64>,
    #[arg(long)]
    min_scr: Option<f64>,
    #[arg(long)]
    min_amplification: Option<f64>,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    edges: PathBuf,
    /// Score only this signal.
    #[arg(long)]
    signal: Option<String>,
    /// Rows per signal.
    #[arg(long, default_value_t = 20)]
    top: usize,
    #[command(flatten)]
    detect: DetectArgs,
}

#[derive(Args)]
struct StreamArgs {
    #[arg(long)]
    edges: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Continue from the checkpoint instead of starting fresh.
    #[arg(long)]
    resume: bool,
    /// Stop after ingesting this many edges.
    #[arg(long)]
    max_edges: Option<u64>,
    /// Alert lines (JSON) per completed day; appended to on resume.
    #[arg(long)]
    alerts: Option<PathBuf>,
    #[command(flatten)]
    detect: DetectArgs,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("").trim_start_matches("error: ");
            return fail(Failure::new("usage", first));
        }
    };
    let result = RunConfig::load(cli.config.as_deref()).and_then(|config| match cli.command {
        Command::Generate(args) => generate(config, args),
        Command::Backtest(args) => backtest_cmd(config, args),
        Command::Score(args) => score(config, args),
        Command::Stream(args) => stream(config, args),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => fail(f),
    }
}

fn fail(f: Failure) -> ExitCode {
    eprintln!("{f}");
    ExitCode::from(f.exit_code())
}

// ---------------------------------------------------------------- helpers

fn require_dir(dir: &Path) -> Result<()> {
    if dir.is_dir() {
        Ok(())
    } else {
        Err(Failure::new(
            "io",
            format!("{}: output directory does not exist", dir.display()),
        ))
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Failure::io(path, e))
}

fn finish(path: &Path, mut w: impl Write) -> Result<()> {
    w.flush().map_err(|e| Failure::io(path, e))
}

fn read_edges(path: &Path) -> Result<(SignalRegistry, Vec<TransactionEdge>)> {
    let file = File::open(path).map_err(|e| Failure::io(path, e))?;
    io::read_edges(BufReader::new(file)).map_err(|e| Failure::core(path, e))
}

fn window(config: &RunConfig, args: &DetectArgs) -> Result<WindowConfig> {
    match args.window.as_deref().or(config.detect.window.as_deref()) {
        None => Ok(WindowConfig::Cumulative),
        Some(w) => w.parse().map_err(|e: Error| Failure::new("config", e.to_string())),
    }
}

fn threshold(config: &RunConfig, args: &DetectArgs) -> Result<f64> {
    let t = args.threshold.or(config.detect.threshold).unwrap_or(DEFAULT_THRESHOLD);
    if t.is_finite() {
        Ok(t)
    } else {
        Err(Failure::new("config", format!("threshold {t} is not finite")))
    }
}

fn resolve(registry: &SignalRegistry, name: &str) -> Result<Signal> {
    let index = registry.lookup(name).map_err(|_| {
        Failure::new(
            "signal",
            format!("unknown signal {name:?} (edge file has {})", names(registry)),
        )
    })?;
    Ok(Signal {
        id: registry.id(index).clone(),
        index,
    })
}

fn names(registry: &SignalRegistry) -> String {
    registry.ids().map(|id| id.as_str()).collect::<Vec<_>>().join(", ")
}

fn signals(registry: &SignalRegistry) -> Vec<Signal> {
    registry
        .ids()
        .enumerate()
        .map(|(index, id)| Signal { id: id.clone(), index })
        .collect()
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".into(), |v| format!("{v:.4}"))
}

// ---------------------------------------------------------------- generate

fn scenario_config(config: &RunConfig, args: &GenerateArgs) -> Result<ScenarioConfig> {
    let section = &config.scenario;
    let seed = args.seed.or(section.seed);
    let mut scenario = match (&args.preset, &section.custom, &section.preset) {
        (Some(name), _, _) | (None, None, Some(name)) => {
            presets::by_name(name, seed.unwrap_or(1)).map_err(|e| Failure::new("config", e.to_string()))?
        }
        (None, Some(custom), _) => custom.clone(),
        (None, None, None) => presets::case1_desk(seed.unwrap_or(1)),
    };
    if let Some(seed) = seed {
        scenario.seed = seed;
    }
    scenario.validate().map_err(|e| Failure::new("config", e.to_string()))?;
    Ok(scenario)
}

fn generate(config: RunConfig, args: GenerateArgs) -> Result<()> {
    require_dir(&args.out)?;
    let cfg = scenario_config(&config, &args)?;
    let s = scenario::generate(&cfg).map_err(|e| Failure::new("config", e.to_string()))?;

    let path = args.out.join("edges.csv");
    let mut w = create(&path)?;
    io::write_edges(&mut w, &s.registry, &s.edges).map_err(|e| Failure::core(&path, e))?;
    finish(&path, w)?;

    let path = args.out.join("truth.json");
    let mut w = create(&path)?;
    io::write_truth(&mut w, &s.truth).map_err(|e| Failure::core(&path, e))?;
    finish(&path, w)?;

    let path = args.out.join("scenario.json");
    let mut w = create(&path)?;
    serde_json::to_writer_pretty(&mut w, &cfg).map_err(|e| Failure::core(&path, e.into()))?;
    finish(&path, w)?;

    let users: std::collections::BTreeSet<_> = s.edges.iter().map(|e| &e.user).collect();
    let nodes: std::collections::BTreeSet<_> = s.edges.iter().map(|e| &e.node).collect();
    let sybils = s.truth.sybil_users.len();
    let cashout = s.truth.cashout_nodes.len();
    println!(
        "seed={} days={} edges={} users={} nodes={}",
        cfg.seed,
        cfg.days,
        s.edges.len(),
        users.len(),
        nodes.len()
    );
    println!(
        "sybils={sybils} cashout_nodes={cashout} sybil_node_ratio={}",
        if cashout > 0 {
            format!("{:.1}", sybils as f64 / cashout as f64)
        } else {
            "NA".into()
        }
    );
    for id in s.registry.ids() {
        println!("carriers[{id}]={}", s.truth.carriers_of(id).len());
    }
    Ok(())
}

// ---------------------------------------------------------------- backtest

fn backtest_cmd(config: RunConfig, args: BacktestArgs) -> Result<()> {
    require_dir(&args.out)?;
    let window = window(&config, &args.detect)?;
    let alert_threshold = threshold(&config, &args.detect)?;
    let thresholds = args
        .thresholds
        .clone()
        .or_else(|| config.detect.thresholds.clone())
        .unwrap_or_else(|| BacktestConfig::default().thresholds);
    let bounds = config.bounds.clone().overlay(Bounds {
        signal: args.bound_signal.clone(),
        min_precision: args.min_precision,
        min_scr: args.min_scr,
        min_amplification: args.min_amplification,
    });

    let (registry, edges) = read_edges(&args.edges)?;
    let truth = {
        let file = File::open(&args.truth).map_err(|e| Failure::io(&args.truth, e))?;
        io::read_truth(BufReader::new(file)).map_err(|e| Failure::core(&args.truth, e))?
    };
    let bound_signal = match &bounds.signal {
        Some(name) => Some(resolve(&registry, name)?),
        None => signals(&registry).into_iter().next(),
    };

    let cfg = BacktestConfig {
        window,
        thresholds,
        alert_threshold,
    };
    let report = backtest::run_backtest(&edges, &registry, &truth, &cfg).map_err(|e| Failure::core(&args.edges, e))?;
    write_backtest(&args.out, &report)?;
    summarize(&report);

    if bounds.is_empty() {
        return Ok(());
    }
    let signal = bound_signal.ok_or_else(|| Failure::new("config", "bounds given but the edge file has no signals"))?;
    check_bounds(&report, &signal, &bounds)
}

fn write_backtest(out: &Path, report: &BacktestReport) -> Result<()> {
    for s in &report.signals {
        let path = out.join(format!("sweep_{}.csv", s.signal));
        let mut w = create(&path)?;
        backtest::write_sweep_csv(&mut w, &s.sweep).map_err(|e| Failure::core(&path, e))?;
        finish(&path, w)?;
    }

    let path = out.join("daily.csv");
    let mut w = create(&path)?;
    report.daily.write_csv(&mut w).map_err(|e| Failure::core(&path, e))?;
    finish(&path, w)?;

    let path = out.join("amplification.csv");
    let mut w = create(&path)?;
    let rows: Vec<_> = report.signals.iter().map(|s| s.amplification.clone()).collect();
    backtest::write_amplification_csv(&mut w, &rows).map_err(|e| Failure::core(&path, e))?;
    finish(&path, w)?;

    let path = out.join("alerts.jsonl");
    let mut w = create(&path)?;
    detector::write_alerts(&mut w, report.alerts()).map_err(|e| Failure::core(&path, e))?;
    finish(&path, w)?;

    let path = out.join("activation.json");
    let mut w = create(&path)?;
    serde_json::to_writer_pretty(&mut w, &report.activation).map_err(|e| Failure::core(&path, e.into()))?;
    writeln!(w).map_err(|e| Failure::io(&path, e))?;
    finish(&path, w)
}

fn summarize(report: &BacktestReport) {
    let days = report.daily.rows.len();
    let support = report.daily.support();
    println!(
        "days={days} alert_days={} first_alert_day={}",
        support.len(),
        support.first().map_or("NA".into(), u32::to_string)
    );
    for s in &report.signals {
        let act = report.activation.get(s.signal.as_str());
        let amp = &s.amplification;
        let row = s.sweep.iter().find(|r| r.threshold == amp.threshold);
        println!(
            "signal={} active={} max_z={} raw_precision={} precision={} scr={} amplification={}{}",
            s.signal,
            act.is_some_and(|a| a.active),
            fmt_opt(act.and_then(|a| a.max_z)),
            fmt_opt(amp.raw.precision),
            fmt_opt(amp.amplified_precision),
            fmt_opt(row.and_then(|r| r.scr)),
            fmt_opt(amp.factor),
            s.skipped
                .as_ref()
                .map_or(String::new(), |why| format!(" skipped=\"{why}\"")),
        );
    }
}

fn check_bounds(report: &BacktestReport, signal: &Signal, bounds: &Bounds) -> Result<()> {
    let s = report
        .signal(signal.id.as_str())
        .ok_or_else(|| Failure::new("signal", format!("no report for signal {}", signal.id)))?;
    let threshold = s.amplification.threshold;
    let row = s.sweep.iter().find(|r| r.threshold == threshold);
    let checks = [
        ("precision", bounds.min_precision, s.amplification.amplified_precision),
        ("scr", bounds.min_scr, row.and_then(|r| r.scr)),
        ("amplification", bounds.min_amplification, s.amplification.factor),
    ];
    let failed: Vec<String> = checks
        .iter()
        .filter_map(|&(name, min, value)| {
            let min = min?;
            match value {
                Some(v) if v >= min => None,
                Some(v) => Some(format!("{name} {v:.4} < {min}")),
                None => Some(format!("{name} unavailable (min {min})")),
            }
        })
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::new(
            "bound",
            format!("{} at z={threshold}: {}", signal.id, failed.join("; ")),
        ))
    }
}

// ---------------------------------------------------------------- score

fn score(config: RunConfig, args: ScoreArgs) -> Result<()> {
    let window = window(&config, &args.detect)?;
    let (registry, edges) = read_edges(&args.edges)?;
    let selected = match &args.signal {
        Some(name) => vec![resolve(&registry, name)?],
        None => signals(&registry),
    };
    let start = edges.iter().map(|e| e.day).max().map_or(0, |last| window.start(last));
    let accs = amplifier::aggregate(edges.iter().filter(|e| e.day >= start), registry.len());

    let stdout = std::io::stdout();
    let mut w = csv::Writer::from_writer(stdout.lock());
    let csv_err = |e: csv::Error| Failure::new("io", format!("stdout: {e}"));
    w.write_record([
        "signal",
        "rank",
        "node",
        "hits",
        "transactions",
        "raw_rate",
        "shrunk_rate",
        "z",
    ])
    .map_err(csv_err)?;
    for signal in &selected {
        let scores = match amplifier::score_window(&accs, signal) {
            Ok(scores) => scores,
            Err(e @ (Error::NoBaseline(_) | Error::DegenerateBaseline { .. })) if args.signal.is_none() => {
                eprintln!("amplify-note: skipped: {e}");
                continue;
            }
            Err(e) => return Err(Failure::core(&args.edges, e)),
        };
        for (rank, s) in scores.iter().take(args.top).enumerate() {
            w.write_record([
                s.signal.to_string(),
                (rank + 1).to_string(),
                s.node.to_string(),
                s.hits.to_string(),
                s.transactions.to_string(),
                format!("{:.6}", s.raw_rate),
                format!("{:.6}", s.shrunk_rate),
                format!("{:.4}", s.z),
            ])
            .map_err(csv_err)?;
        }
    }
    w.flush().map_err(|e| Failure::new("io", format!("stdout: {e}")))
}

// ---------------------------------------------------------------- stream

fn load_checkpoint(path: &Path) -> Result<(Engine, u64)> {
    let file = File::open(path).map_err(|e| Failure::io(path, e))?;
    Engine::load(BufReader::new(file)).map_err(|e| {
        let kind = if matches!(e, Error::Io(_)) { "io" } else { "checkpoint" };
        Failure::new(kind, format!("{}: {e}", path.display()))
    })
}

fn save_checkpoint(path: &Path, engine: &Engine, cursor: u64) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    let mut w = create(&tmp)?;
    engine.save(&mut w, cursor).map_err(|e| Failure::core(&tmp, e))?;
    finish(&tmp, w)?;
    std::fs::rename(&tmp, path).map_err(|e| Failure::io(path, e))
}

/// Alerts for the window ending at `day`, over `ingested` (day-sorted).
fn day_alerts(engine: &Engine, ingested: &[TransactionEdge], day: u32, threshold: f64) -> Result<Vec<Alert>> {
    let from = ingested.partition_point(|e| e.day < engine.window().start(day));
    let window_edges = &ingested[from..];
    let mut alerts = Vec::new();
    for signal in signals(engine.registry()) {
        let scores = match engine.score(&signal) {
            Ok(scores) => scores,
            Err(Error::NoBaseline(_) | Error::DegenerateBaseline { .. }) => continue,
            Err(e) => return Err(Failure::new("engine", e.to_string())),
        };
        alerts.extend(attach_users(
            &flag_nodes(&scores, threshold),
            window_edges,
            &signal,
            day,
        ));
    }
    Ok(alerts)
}

fn stream(config: RunConfig, args: StreamArgs) -> Result<()> {
    let threshold = threshold(&config, &args.detect)?;
    let (registry, edges) = read_edges(&args.edges)?;
    let (mut engine, cursor) = if args.resume {
        let (engine, cursor) = load_checkpoint(&args.checkpoint)?;
        if engine.registry().ids().ne(registry.ids()) {
            return Err(Failure::new(
                "checkpoint",
                format!(
                    "{}: signals [{}] do not match edge file [{}]",
                    args.checkpoint.display(),
                    names(engine.registry()),
                    names(&registry)
                ),
            ));
        }
        if let Some(flag) = &args.detect.window {
            let w: WindowConfig = flag.parse().map_err(|e: Error| Failure::new("config", e.to_string()))?;
            if w != engine.window() {
                return Err(Failure::new(
                    "config",
                    format!("--window {flag} differs from the checkpoint window"),
                ));
            }
        }
        if cursor > edges.len() as u64 {
            return Err(Failure::new(
                "checkpoint",
                format!(
                    "cursor {cursor} is past the end of {} ({} edges)",
                    args.edges.display(),
                    edges.len()
                ),
            ));
        }
        (engine, cursor as usize)
    } else {
        let engine =
            Engine::new(registry, window(&config, &args.detect)?).map_err(|e| Failure::new("config", e.to_string()))?;
        (engine, 0)
    };

    let mut alerts_out = match &args.alerts {
        Some(path) => {
            let file = std::fs::OpenOptions::new()
                .create(true)
                .write(true)
                .append(args.resume)
                .truncate(!args.resume)
                .open(path)
                .map_err(|e| Failure::io(path, e))?;
            Some((path.clone(), BufWriter::new(file)))
        }
        None => None,
    };
    let mut emitted = 0usize;
    let mut emit = |engine: &Engine, upto: usize, day: u32| -> Result<()> {
        let alerts = day_alerts(engine, &edges[..upto], day, threshold)?;
        emitted += alerts.len();
        if let Some((path, w)) = alerts_out.as_mut() {
            detector::write_alerts(&mut *w, &alerts).map_err(|e| Failure::core(path, e))?;
        }
        Ok(())
    };

    let end = match args.max_edges {
        Some(n) => edges.len().min(cursor.saturating_add(n as usize)),
        None => edges.len(),
    };
    for (idx, e) in edges.iter().enumerate().take(end).skip(cursor) {
        match engine.current_day() {
            Some(d) if e.day < d => {
                return Err(Failure::new(
                    "input",
                    format!(
                        "{}: line {}: day {} precedes day {d}; stream input must be sorted by day",
                        args.edges.display(),
                        idx + 2,
                        e.day
                    ),
                ));
            }
            Some(d) if e.day > d => {
                emit(&engine, idx, d)?;
                engine.advance_to(e.day);
            }
            Some(_) => {}
            None => engine.advance_to(e.day),
        }
        engine
            .ingest(e)
            .map_err(|err| Failure::new("input", format!("{}: line {}: {err}", args.edges.display(), idx + 2)))?;
    }
    let ingested = end - cursor;
    if end == edges.len() && ingested > 0 {
        if let Some(d) = engine.current_day() {
            emit(&engine, end, d)?;
        }
    }
    if let Some((path, w)) = alerts_out {
        finish(&path, w)?;
    }
    save_checkpoint(&args.checkpoint, &engine, end as u64)?;
    println!(
        "ingested={ingested} cursor={end} total_edges={} day={} nodes={} alerts={emitted} complete={}",
        edges.len(),
        engine.current_day().map_or("NA".into(), |d| d.to_string()),
        engine.node_count(),
        end == edges.len()
    );
    Ok(())
}
