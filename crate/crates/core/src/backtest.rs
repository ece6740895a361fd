//! Metrics against ground truth: precision, signal-conditioned recall (SCR),
//! signal coverage and unconditional recall, plus threshold sweeps, the raw
//! "flag every carrier" baseline and daily time series.
//!
//! Users count once per row no matter how many nodes or signals flagged them.

use std::collections::BTreeSet;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::amplifier::{self, NodeScore, Signal};
use crate::detector::{self, ActivationReport, Alert};
use crate::engine::{self, ReplayConfig, ReplayOutput, WindowConfig};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::scenario::GroundTruth;
use crate::signal::{SignalId, SignalRegistry, TransactionEdge, UserId};

/// Raw counts behind a metrics row.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricCounts {
    pub flagged_nodes: usize,
    pub flagged_users: usize,
    /// Flagged users that are fraudsters.
    pub caught: usize,
    /// Flagged users that are fraudsters carrying the signal.
    pub caught_carriers: usize,
    /// Fraudsters carrying the signal.
    pub carriers: usize,
    pub fraudsters: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub threshold: f64,
    pub counts: MetricCounts,
    pub precision: f64,
    /// `None` when no fraudster carries the signal.
    pub scr: Option<f64>,
    /// `None` when the ground truth has no fraudsters.
    pub coverage: Option<f64>,
    pub unconditional_recall: Option<f64>,
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

impl MetricsRow {
    pub fn from_counts(threshold: f64, counts: MetricCounts) -> Self {
        let scr = ratio(counts.caught_carriers, counts.carriers);
        let coverage = ratio(counts.carriers, counts.fraudsters);
        MetricsRow {
            threshold,
            counts,
            precision: ratio(counts.caught, counts.flagged_users).unwrap_or(0.0),
            scr,
            coverage,
            unconditional_recall: scr.zip(coverage).map(|(s, c)| s * c),
        }
    }
}

pub fn compute_metrics(
    threshold: f64,
    flagged_nodes: usize,
    flagged_users: &BTreeSet<UserId>,
    truth: &GroundTruth,
    signal: &SignalId,
) -> MetricsRow {
    let carriers = truth.carriers.get(signal);
    let counts = MetricCounts {
        flagged_nodes,
        flagged_users: flagged_users.len(),
        caught: flagged_users.iter().filter(|u| truth.is_fraudster(u)).count(),
        caught_carriers: carriers.map_or(0, |c| flagged_users.intersection(c).count()),
        carriers: carriers.map_or(0, BTreeSet::len),
        fraudsters: truth.sybil_users.len(),
    };
    MetricsRow::from_counts(threshold, counts)
}

/// Precision of using the signal alone: flag every user with at least one hit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawBaseline {
    pub signal: SignalId,
    pub carriers: usize,
    pub fraudster_carriers: usize,
    pub precision: Option<f64>,
}

impl RawBaseline {
    /// Amplified precision divided by raw precision.
    pub fn amplification(&self, amplified_precision: f64) -> Option<f64> {
        self.precision.filter(|&p| p > 0.0).map(|p| amplified_precision / p)
    }
}

pub fn raw_signal_baseline<'a, I>(edges: I, truth: &GroundTruth, signal: &Signal) -> RawBaseline
where
    I: IntoIterator<Item = &'a TransactionEdge>,
{
    let carriers: BTreeSet<&UserId> = edges
        .into_iter()
        .filter(|e| e.hit(signal.index))
        .map(|e| &e.user)
        .collect();
    let fraudster_carriers = carriers.iter().filter(|u| truth.is_fraudster(u)).count();
    RawBaseline {
        signal: signal.id.clone(),
        carriers: carriers.len(),
        fraudster_carriers,
        precision: ratio(fraudster_carriers, carriers.len()),
    }
}

/// One metrics row per threshold over a single scored window.
pub fn threshold_sweep(
    scores: &[NodeScore],
    window_edges: &[TransactionEdge],
    signal: &Signal,
    truth: &GroundTruth,
    thresholds: &[f64],
) -> Result<Vec<MetricsRow>> {
    threshold_sweep_with(Exec::default(), scores, window_edges, signal, truth, thresholds)
}

pub fn threshold_sweep_with(
    exec: Exec,
    scores: &[NodeScore],
    window_edges: &[TransactionEdge],
    signal: &Signal,
    truth: &GroundTruth,
    thresholds: &[f64],
) -> Result<Vec<MetricsRow>> {
    if thresholds.iter().any(|t| !t.is_finite()) || thresholds.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::UnsortedThresholds);
    }
    let Some(&lowest) = thresholds.first() else {
        return Ok(Vec::new());
    };
    // Alerts at the lowest threshold contain every alert of the higher ones.
    let alerts = detector::attach_users(&detector::flag_nodes(scores, lowest), window_edges, signal, 0);
    Ok(exec.map(thresholds, |&threshold| {
        let above: Vec<&Alert> = alerts.iter().filter(|a| a.z >= threshold).collect();
        let users: BTreeSet<UserId> = above.iter().flat_map(|a| a.suspicious_users.iter().cloned()).collect();
        compute_metrics(threshold, above.len(), &users, truth, &signal.id)
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DailyRow {
    pub day: u32,
    /// Distinct flagged users per signal, in registry order.
    pub per_signal: Vec<usize>,
    /// Distinct users flagged by any signal that day.
    pub flagged_any: usize,
    pub cumulative_flagged: usize,
    /// Cumulative flagged users that are confirmed fraudsters.
    pub cumulative_confirmed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DailySeries {
    pub signals: Vec<SignalId>,
    pub rows: Vec<DailyRow>,
}

impl DailySeries {
    /// True when no signal flagged anyone on any day.
    pub fn is_all_zero(&self) -> bool {
        self.rows.iter().all(|r| r.flagged_any == 0)
    }

    /// Days with at least one flagged user.
    pub fn support(&self) -> Vec<u32> {
        self.rows.iter().filter(|r| r.flagged_any > 0).map(|r| r.day).collect()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["day".to_string()];
        header.extend(self.signals.iter().map(|s| s.to_string()));
        header.extend(["flagged_any", "cumulative_flagged", "cumulative_confirmed"].map(String::from));
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![r.day.to_string()];
            rec.extend(r.per_signal.iter().map(usize::to_string));
            rec.extend([r.flagged_any, r.cumulative_flagged, r.cumulative_confirmed].map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn daily_series(replay: &ReplayOutput, truth: &GroundTruth) -> DailySeries {
    let mut cumulative: BTreeSet<UserId> = BTreeSet::new();
    let rows = replay
        .days
        .iter()
        .map(|day| {
            let per_signal: Vec<BTreeSet<UserId>> = day.signals.iter().map(|s| s.outcome.flagged_users()).collect();
            let any: BTreeSet<UserId> = per_signal.iter().flatten().cloned().collect();
            cumulative.extend(any.iter().cloned());
            DailyRow {
                day: day.day,
                per_signal: per_signal.iter().map(BTreeSet::len).collect(),
                flagged_any: any.len(),
                cumulative_flagged: cumulative.len(),
                cumulative_confirmed: cumulative.iter().filter(|u| truth.is_fraudster(u)).count(),
            }
        })
        .collect();
    DailySeries {
        signals: replay.signals.clone(),
        rows,
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |v| format!("{v:.6}"))
}

pub fn write_sweep_csv<W: Write>(out: W, rows: &[MetricsRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "threshold",
        "flagged_nodes",
        "flagged_users",
        "caught",
        "carriers",
        "fraudsters",
        "precision",
        "scr",
        "coverage",
        "unconditional_recall",
    ])?;
    for r in rows {
        let c = &r.counts;
        w.write_record([
            r.threshold.to_string(),
            c.flagged_nodes.to_string(),
            c.flagged_users.to_string(),
            c.caught.to_string(),
            c.carriers.to_string(),
            c.fraudsters.to_string(),
            format!("{:.6}", r.precision),
            fmt_opt(r.scr),
            fmt_opt(r.coverage),
            fmt_opt(r.unconditional_recall),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AmplificationRow {
    pub raw: RawBaseline,
    pub threshold: f64,
    pub amplified_precision: Option<f64>,
    pub factor: Option<f64>,
}

pub fn write_amplification_csv<W: Write>(out: W, rows: &[AmplificationRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "signal",
        "raw_carriers",
        "raw_fraudster_carriers",
        "raw_precision",
        "threshold",
        "amplified_precision",
        "amplification_factor",
    ])?;
    for r in rows {
        w.write_record([
            r.raw.signal.to_string(),
            r.raw.carriers.to_string(),
            r.raw.fraudster_carriers.to_string(),
            fmt_opt(r.raw.precision),
            r.threshold.to_string(),
            fmt_opt(r.amplified_precision),
            fmt_opt(r.factor),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct BacktestConfig {
    pub window: WindowConfig,
    /// Sweep thresholds, ascending.
    pub thresholds: Vec<f64>,
    /// Threshold used for the daily replay and the amplification report.
    pub alert_threshold: f64,
}

impl Default for BacktestConfig {
    fn default() -> Self {
        Self {
            window: WindowConfig::Cumulative,
            thresholds: vec![1.0, 5.0, 10.0, 40.0],
            alert_threshold: 40.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SignalReport {
    pub signal: SignalId,
    /// Sweep over the final day's window; empty when the signal is inactive.
    pub sweep: Vec<MetricsRow>,
    pub amplification: AmplificationRow,
    pub skipped: Option<String>,
}

#[derive(Debug, Clone)]
pub struct BacktestReport {
    pub replay: ReplayOutput,
    pub daily: DailySeries,
    pub signals: Vec<SignalReport>,
    pub activation: ActivationReport,
}

impl BacktestReport {
    pub fn signal(&self, name: &str) -> Option<&SignalReport> {
        self.signals.iter().find(|s| s.signal.as_str() == name)
    }

    pub fn alerts(&self) -> impl Iterator<Item = &Alert> {
        self.replay.days.iter().flat_map(|d| d.alerts())
    }
}

/// Daily replay over the whole edge stream, then a threshold sweep and the
/// raw-signal comparison on the window ending at the last day.
pub fn run_backtest(
    edges: &[TransactionEdge],
    registry: &SignalRegistry,
    truth: &GroundTruth,
    config: &BacktestConfig,
) -> Result<BacktestReport> {
    let replay = engine::replay_daily(
        edges,
        registry,
        &ReplayConfig {
            window: config.window,
            threshold: config.alert_threshold,
            sort: true,
        },
    )?;
    let daily = daily_series(&replay, truth);
    let activation = replay.activation();

    let mut sorted_storage = None;
    let edges = if edges.windows(2).all(|w| w[0].day <= w[1].day) {
        edges
    } else {
        let mut v = edges.to_vec();
        v.sort_by_key(|e| e.day);
        &sorted_storage.insert(v)[..]
    };
    let window_edges = match edges.last() {
        Some(last) => {
            let start = edges.partition_point(|e| e.day < config.window.start(last.day));
            &edges[start..]
        }
        None => edges,
    };
    let accs = amplifier::aggregate(window_edges, registry.len());

    let mut signals = Vec::new();
    for (index, id) in registry.ids().enumerate() {
        let signal = Signal { id: id.clone(), index };
        let raw = raw_signal_baseline(window_edges, truth, &signal);
        let (sweep, skipped) = match amplifier::score_window(&accs, &signal) {
            Ok(scores) => (
                threshold_sweep(&scores, window_edges, &signal, truth, &config.thresholds)?,
                None,
            ),
            Err(e @ (Error::NoBaseline(_) | Error::DegenerateBaseline { .. })) => (Vec::new(), Some(e.to_string())),
            Err(e) => return Err(e),
        };
        let amplified_precision = match sweep.iter().find(|r| r.threshold == config.alert_threshold) {
            Some(row) => Some(row.precision),
            None if skipped.is_none() => {
                let scores = amplifier::score_window(&accs, &signal)?;
                threshold_sweep(&scores, window_edges, &signal, truth, &[config.alert_threshold])?
                    .first()
                    .map(|r| r.precision)
            }
            None => None,
        };
        let factor = amplified_precision.and_then(|p| raw.amplification(p));
        signals.push(SignalReport {
            signal: id.clone(),
            sweep,
            amplification: AmplificationRow {
                raw,
                threshold: config.alert_threshold,
                amplified_precision,
                factor,
            },
            skipped,
        });
    }
    Ok(BacktestReport {
        replay,
        daily,
        signals,
        activation,
    })
}
