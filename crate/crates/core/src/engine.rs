//! Incremental scoring state and turn-based daily replay.
//!
//! [`Engine`] keeps one [`NodeAccumulator`] per node plus global counters, so
//! ingesting an edge touches one node entry and the globals. Scores are
//! computed lazily from counters; since every counter is an integer sum, the
//! result is independent of ingestion order and equal to the batch pipeline.
//!
//! In trailing-window mode the engine also keeps per-day deltas so that days
//! falling out of the window can be subtracted at the next scoring turn.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::amplifier::{self, NodeScore, Signal};
use crate::detector::{self, ActivationReport, Alert, SignalOutcome};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::signal::{GlobalBaseline, NodeAccumulator, NodeId, SignalId, SignalRegistry, TransactionEdge, UserId};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum WindowConfig {
    /// Everything ingested since the start of the run.
    #[default]
    Cumulative,
    /// The last `days` day-indices, ending at the current scoring day.
    Trailing { days: u32 },
}

impl WindowConfig {
    pub fn validate(self) -> Result<Self> {
        match self {
            WindowConfig::Trailing { days: 0 } => Err(Error::InvalidConfig(
                "trailing window must span at least one day".into(),
            )),
            w => Ok(w),
        }
    }

    /// First day retained when scoring at `day`.
    pub fn start(self, day: u32) -> u32 {
        match self {
            WindowConfig::Cumulative => 0,
            WindowConfig::Trailing { days } => (day + 1).saturating_sub(days),
        }
    }
}

impl std::str::FromStr for WindowConfig {
    type Err = Error;

    /// Accepts `cumulative` or `trailing:<days>`.
    fn from_str(s: &str) -> Result<Self> {
        match s.split_once(':') {
            None if s == "cumulative" => Ok(WindowConfig::Cumulative),
            Some(("trailing", n)) => n
                .parse()
                .map_err(|_| Error::InvalidConfig(format!("bad trailing window length {n:?}")))
                .and_then(|days| WindowConfig::Trailing { days }.validate()),
            _ => Err(Error::InvalidConfig(format!("unknown window {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Engine {
    registry: SignalRegistry,
    window: WindowConfig,
    nodes: HashMap<NodeId, NodeAccumulator>,
    total_hits: Vec<u64>,
    total_transactions: u64,
    active_nodes: u64,
    current_day: Option<u32>,
    day_deltas: BTreeMap<u32, HashMap<NodeId, NodeAccumulator>>,
}

impl Engine {
    pub fn new(registry: SignalRegistry, window: WindowConfig) -> Result<Self> {
        let n = registry.len();
        Ok(Self {
            registry,
            window: window.validate()?,
            nodes: HashMap::new(),
            total_hits: vec![0; n],
            total_transactions: 0,
            active_nodes: 0,
            current_day: None,
            day_deltas: BTreeMap::new(),
        })
    }

    pub fn registry(&self) -> &SignalRegistry {
        &self.registry
    }

    pub fn window(&self) -> WindowConfig {
        self.window
    }

    pub fn current_day(&self) -> Option<u32> {
        self.current_day
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn total_transactions(&self) -> u64 {
        self.total_transactions
    }

    pub fn total_hits(&self, signal: usize) -> u64 {
        self.total_hits[signal]
    }

    pub fn active_nodes(&self) -> u64 {
        self.active_nodes
    }

    pub fn node(&self, node: &NodeId) -> Option<&NodeAccumulator> {
        self.nodes.get(node)
    }

    pub fn signal(&self, name: &str) -> Result<Signal> {
        let index = self.registry.lookup(name)?;
        Ok(Signal {
            id: self.registry.id(index).clone(),
            index,
        })
    }

    fn earliest_retained(&self) -> u32 {
        self.current_day.map_or(0, |d| self.window.start(d))
    }

    /// Adds one edge to its node's counters and to the global counters.
    ///
    /// Does not move the scoring day; call [`advance_to`](Self::advance_to) at
    /// turn boundaries.
    pub fn ingest(&mut self, edge: &TransactionEdge) -> Result<()> {
        self.registry.check_mask(edge.hits)?;
        if let WindowConfig::Trailing { .. } = self.window {
            let earliest = self.earliest_retained();
            if edge.day < earliest {
                return Err(Error::StaleEdge {
                    day: edge.day,
                    earliest,
                });
            }
            let n = self.registry.len();
            self.day_deltas
                .entry(edge.day)
                .or_default()
                .entry(edge.node.clone())
                .or_insert_with(|| NodeAccumulator::new(edge.node.clone(), n))
                .observe(edge.hits);
        }
        let acc = match self.nodes.get_mut(&edge.node) {
            Some(acc) => acc,
            None => self
                .nodes
                .entry(edge.node.clone())
                .or_insert_with(|| NodeAccumulator::new(edge.node.clone(), self.total_hits.len())),
        };
        if acc.transactions == 0 {
            self.active_nodes += 1;
        }
        acc.observe(edge.hits);
        self.total_transactions += 1;
        let mut bits = edge.hits.0;
        while bits != 0 {
            self.total_hits[bits.trailing_zeros() as usize] += 1;
            bits &= bits - 1;
        }
        Ok(())
    }

    /// Moves the scoring day forward, evicting days that leave a trailing window.
    pub fn advance_to(&mut self, day: u32) {
        self.current_day = Some(self.current_day.map_or(day, |d| d.max(day)));
        if let WindowConfig::Trailing { .. } = self.window {
            let earliest = self.earliest_retained();
            let keep = self.day_deltas.split_off(&earliest);
            let evicted = std::mem::replace(&mut self.day_deltas, keep);
            for delta in evicted.into_values().flat_map(HashMap::into_values) {
                self.retract(&delta);
            }
        }
    }

    fn retract(&mut self, delta: &NodeAccumulator) {
        let acc = self.nodes.get_mut(&delta.node).expect("evicted node is tracked");
        acc.retract(delta);
        self.total_transactions -= delta.transactions;
        for (total, s) in self.total_hits.iter_mut().zip(&delta.hits) {
            *total -= s;
        }
        if acc.transactions == 0 {
            self.nodes.remove(&delta.node);
            self.active_nodes -= 1;
        }
    }

    /// Global counters for `signal`, read in O(1).
    pub fn baseline(&self, signal: &Signal) -> Result<GlobalBaseline> {
        if self.total_transactions == 0 {
            return Err(Error::NoBaseline(signal.id.clone()));
        }
        Ok(GlobalBaseline {
            signal: signal.id.clone(),
            total_hits: self.total_hits[signal.index],
            total_transactions: self.total_transactions,
            active_nodes: self.active_nodes,
        })
    }

    /// Score of a single node computed on demand from the current counters.
    pub fn query_score(&self, node: &NodeId, signal: &Signal) -> Result<NodeScore> {
        let acc = self.nodes.get(node).ok_or_else(|| Error::NodeNotFound(node.clone()))?;
        amplifier::score_node(acc, &self.baseline(signal)?, signal)
    }

    /// Node accumulators sorted by node id.
    pub fn snapshot(&self) -> Vec<NodeAccumulator> {
        let mut accs: Vec<NodeAccumulator> = self.nodes.values().cloned().collect();
        accs.sort_unstable_by(|a, b| a.node.cmp(&b.node));
        accs
    }

    pub fn score(&self, signal: &Signal) -> Result<Vec<NodeScore>> {
        self.score_with(Exec::default(), signal)
    }

    pub fn score_with(&self, exec: Exec, signal: &Signal) -> Result<Vec<NodeScore>> {
        let baseline = self.baseline(signal)?;
        let accs: Vec<&NodeAccumulator> = self.nodes.values().collect();
        amplifier::score_all_with(exec, &accs, &baseline, signal)
    }

    /// Folds a shard that ingested a disjoint part of the same stream.
    pub fn merge_shard(&mut self, shard: Engine) -> Result<()> {
        if shard.registry != self.registry || shard.window != self.window {
            return Err(Error::InvalidConfig("shards disagree on signals or window".into()));
        }
        for (id, acc) in shard.nodes {
            match self.nodes.get_mut(&id) {
                Some(mine) => mine.absorb(&acc)?,
                None => {
                    self.active_nodes += 1;
                    self.nodes.insert(id, acc);
                }
            }
        }
        for (day, deltas) in shard.day_deltas {
            let mine = self.day_deltas.entry(day).or_default();
            for (id, acc) in deltas {
                match mine.get_mut(&id) {
                    Some(m) => m.absorb(&acc)?,
                    None => {
                        mine.insert(id, acc);
                    }
                }
            }
        }
        self.total_transactions += shard.total_transactions;
        for (a, b) in self.total_hits.iter_mut().zip(&shard.total_hits) {
            *a += b;
        }
        self.current_day = match (self.current_day, shard.current_day) {
            (Some(a), Some(b)) => Some(a.max(b)),
            (a, b) => a.or(b),
        };
        if let Some(day) = self.current_day {
            self.advance_to(day);
        }
        Ok(())
    }

    pub fn checkpoint(&self, cursor: u64) -> Checkpoint {
        let sorted = |m: &HashMap<NodeId, NodeAccumulator>| {
            let mut v: Vec<NodeAccumulator> = m.values().cloned().collect();
            v.sort_unstable_by(|a, b| a.node.cmp(&b.node));
            v
        };
        Checkpoint {
            version: CHECKPOINT_VERSION,
            signals: self.registry.clone(),
            window: self.window,
            current_day: self.current_day,
            cursor,
            totals: Totals {
                transactions: self.total_transactions,
                hits: self.total_hits.clone(),
                active_nodes: self.active_nodes,
            },
            nodes: sorted(&self.nodes),
            day_deltas: self
                .day_deltas
                .iter()
                .map(|(&day, m)| DayDelta { day, nodes: sorted(m) })
                .collect(),
        }
    }

    pub fn save<W: Write>(&self, out: W, cursor: u64) -> Result<()> {
        serde_json::to_writer_pretty(out, &self.checkpoint(cursor))?;
        Ok(())
    }

    /// Restores an engine and the stream cursor stored alongside it.
    pub fn load<R: Read>(input: R) -> Result<(Engine, u64)> {
        let cp: Checkpoint = serde_json::from_reader(input)?;
        let cursor = cp.cursor;
        Ok((Engine::from_checkpoint(cp)?, cursor))
    }

    pub fn from_checkpoint(cp: Checkpoint) -> Result<Engine> {
        if cp.version != CHECKPOINT_VERSION {
            return Err(Error::CheckpointVersion(cp.version));
        }
        let mut engine = Engine::new(cp.signals, cp.window)?;
        engine.current_day = cp.current_day;
        let n = engine.registry.len();
        for mut acc in cp.nodes {
            acc.hits.resize(n.max(acc.hits.len()), 0);
            engine.total_transactions += acc.transactions;
            for (t, s) in engine.total_hits.iter_mut().zip(&acc.hits) {
                *t += s;
            }
            engine.active_nodes += u64::from(acc.transactions > 0);
            engine.nodes.insert(acc.node.clone(), acc);
        }
        for delta in cp.day_deltas {
            engine.day_deltas.insert(
                delta.day,
                delta.nodes.into_iter().map(|a| (a.node.clone(), a)).collect(),
            );
        }
        let totals = Totals {
            transactions: engine.total_transactions,
            hits: engine.total_hits.clone(),
            active_nodes: engine.active_nodes,
        };
        if totals != cp.totals {
            return Err(Error::InvalidConfig(
                "checkpoint totals do not match node counters".into(),
            ));
        }
        Ok(engine)
    }
}

/// Serialized engine state. `nodes` and each `day_deltas[].nodes` are sorted
/// by node id; `totals` must equal the column sums of `nodes`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub signals: SignalRegistry,
    pub window: WindowConfig,
    pub current_day: Option<u32>,
    /// Number of input edges consumed when the checkpoint was taken.
    pub cursor: u64,
    pub totals: Totals,
    pub nodes: Vec<NodeAccumulator>,
    pub day_deltas: Vec<DayDelta>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Totals {
    pub transactions: u64,
    pub hits: Vec<u64>,
    pub active_nodes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DayDelta {
    pub day: u32,
    pub nodes: Vec<NodeAccumulator>,
}

#[derive(Debug, Clone)]
pub struct ReplayConfig {
    pub window: WindowConfig,
    pub threshold: f64,
    /// Sort edges by day instead of rejecting unsorted input.
    pub sort: bool,
}

impl Default for ReplayConfig {
    fn default() -> Self {
        Self {
            window: WindowConfig::Cumulative,
            threshold: 40.0,
            sort: false,
        }
    }
}

/// Per-signal outcome of one daily turn.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalTurn {
    pub outcome: SignalOutcome,
    /// Why the signal was not scored, if it was not.
    pub skipped: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DayResult {
    pub day: u32,
    pub signals: Vec<SignalTurn>,
}

impl DayResult {
    pub fn alerts(&self) -> impl Iterator<Item = &Alert> {
        self.signals.iter().flat_map(|s| s.outcome.alerts.iter())
    }

    pub fn flagged_users(&self, signal: &str) -> std::collections::BTreeSet<UserId> {
        self.signals
            .iter()
            .find(|s| s.outcome.signal.as_str() == signal)
            .map(|s| s.outcome.flagged_users())
            .unwrap_or_default()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayOutput {
    pub signals: Vec<SignalId>,
    pub threshold: f64,
    pub days: Vec<DayResult>,
}

impl ReplayOutput {
    /// Max z of each signal over all turns.
    pub fn activation(&self) -> ActivationReport {
        let mut report = ActivationReport::new(self.threshold);
        for id in &self.signals {
            report.observe(id, None);
        }
        for day in &self.days {
            for turn in &day.signals {
                report.observe(&turn.outcome.signal, turn.outcome.max_z);
            }
        }
        report
    }
}

fn check_sorted(edges: &[TransactionEdge]) -> Result<()> {
    for (i, pair) in edges.windows(2).enumerate() {
        if pair[1].day < pair[0].day {
            return Err(Error::Unsorted {
                position: i + 1,
                previous: pair[0].day,
                day: pair[1].day,
            });
        }
    }
    Ok(())
}

/// Turn-based replay: for every day from the first to the last edge day,
/// ingest that day's edges, then rescore every node for every signal over the
/// configured window and raise alerts at the threshold.
pub fn replay_daily(
    edges: &[TransactionEdge],
    registry: &SignalRegistry,
    config: &ReplayConfig,
) -> Result<ReplayOutput> {
    let sorted;
    let edges = match check_sorted(edges) {
        Ok(()) => edges,
        Err(_) if config.sort => {
            let mut v = edges.to_vec();
            v.sort_by_key(|e| e.day);
            sorted = v;
            &sorted[..]
        }
        Err(e) => return Err(e),
    };
    let signals: Vec<Signal> = registry
        .ids()
        .enumerate()
        .map(|(index, id)| Signal { id: id.clone(), index })
        .collect();
    let mut out = ReplayOutput {
        signals: signals.iter().map(|s| s.id.clone()).collect(),
        threshold: config.threshold,
        days: Vec::new(),
    };
    let (Some(first), Some(last)) = (edges.first(), edges.last()) else {
        return Ok(out);
    };
    let mut engine = Engine::new(registry.clone(), config.window)?;
    let mut cursor = 0;
    for day in first.day..=last.day {
        engine.advance_to(day);
        let day_end = cursor + edges[cursor..].partition_point(|e| e.day <= day);
        for edge in &edges[cursor..day_end] {
            engine.ingest(edge)?;
        }
        cursor = day_end;
        let window_start = edges[..day_end].partition_point(|e| e.day < config.window.start(day));
        let window_edges = &edges[window_start..day_end];

        let mut turns = Vec::with_capacity(signals.len());
        for signal in &signals {
            turns.push(match engine.score(signal) {
                Ok(scores) => {
                    let flagged = detector::flag_nodes(&scores, config.threshold);
                    SignalTurn {
                        outcome: SignalOutcome {
                            signal: signal.id.clone(),
                            max_z: scores.first().map(|s| s.z),
                            alerts: detector::attach_users(&flagged, window_edges, signal, day),
                        },
                        skipped: None,
                    }
                }
                Err(e @ (Error::NoBaseline(_) | Error::DegenerateBaseline { .. })) => SignalTurn {
                    outcome: SignalOutcome {
                        signal: signal.id.clone(),
                        max_z: None,
                        alerts: Vec::new(),
                    },
                    skipped: Some(e.to_string()),
                },
                Err(e) => return Err(e),
            });
        }
        out.days.push(DayResult { day, signals: turns });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::HitMask;

    fn registry() -> SignalRegistry {
        SignalRegistry::with_signals(["a", "b"]).unwrap()
    }

    fn edge(user: &str, node: &str, day: u32, hits: u64) -> TransactionEdge {
        TransactionEdge {
            user: UserId::new(user).unwrap(),
            node: NodeId::new(node).unwrap(),
            day,
            hits: HitMask(hits),
        }
    }

    fn node(id: &str) -> NodeId {
        NodeId::new(id).unwrap()
    }

    #[test]
    fn ingest_into_empty_state() {
        let mut e = Engine::new(registry(), WindowConfig::Cumulative).unwrap();
        e.ingest(&edge("u", "n", 0, 1)).unwrap();
        assert_eq!(e.node(&node("n")).unwrap().transactions, 1);
        assert_eq!(e.total_transactions(), 1);
        assert_eq!(e.active_nodes(), 1);
        e.ingest(&edge("u", "n", 0, 0)).unwrap();
        assert_eq!(e.node(&node("n")).unwrap().transactions, 2);
        assert_eq!(e.active_nodes(), 1);
    }

    #[test]
    fn query_errors() {
        let mut e = Engine::new(registry(), WindowConfig::Cumulative).unwrap();
        let a = e.signal("a").unwrap();
        assert!(matches!(e.query_score(&node("n"), &a), Err(Error::NodeNotFound(_))));
        e.ingest(&edge("u", "n", 0, 1)).unwrap();
        assert!(matches!(
            e.query_score(&node("n"), &a),
            Err(Error::DegenerateBaseline { .. })
        ));
    }

    #[test]
    fn unregistered_bits_rejected() {
        let mut e = Engine::new(registry(), WindowConfig::Cumulative).unwrap();
        assert!(matches!(
            e.ingest(&edge("u", "n", 0, 0b100)),
            Err(Error::UnknownSignal(_))
        ));
    }

    #[test]
    fn window_parsing() {
        assert_eq!("cumulative".parse::<WindowConfig>().unwrap(), WindowConfig::Cumulative);
        assert_eq!(
            "trailing:7".parse::<WindowConfig>().unwrap(),
            WindowConfig::Trailing { days: 7 }
        );
        assert!("trailing:0".parse::<WindowConfig>().is_err());
        assert!("sliding".parse::<WindowConfig>().is_err());
        assert!(Engine::new(registry(), WindowConfig::Trailing { days: 0 }).is_err());
    }

    #[test]
    fn trailing_eviction_drops_idle_nodes() {
        let mut e = Engine::new(registry(), WindowConfig::Trailing { days: 2 }).unwrap();
        e.ingest(&edge("u", "old", 0, 1)).unwrap();
        e.ingest(&edge("u", "new", 1, 0)).unwrap();
        e.advance_to(2);
        assert!(e.node(&node("old")).is_none());
        assert_eq!(e.active_nodes(), 1);
        assert_eq!(e.total_hits(0), 0);
        assert_eq!(e.total_transactions(), 1);
        assert!(matches!(e.ingest(&edge("u", "x", 0, 0)), Err(Error::StaleEdge { .. })));
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut e = Engine::new(registry(), WindowConfig::Trailing { days: 3 }).unwrap();
        for (i, d) in [0, 0, 1, 2, 2, 3].into_iter().enumerate() {
            e.ingest(&edge(&format!("u{i}"), &format!("n{}", i % 2), d, (i % 4) as u64))
                .unwrap();
        }
        let mut buf = Vec::new();
        e.save(&mut buf, 6).unwrap();
        let (back, cursor) = Engine::load(&buf[..]).unwrap();
        assert_eq!(cursor, 6);
        assert_eq!(back, e);
    }

    #[test]
    fn checkpoint_rejects_unknown_version_and_bad_totals() {
        let e = Engine::new(registry(), WindowConfig::Cumulative).unwrap();
        let mut cp = e.checkpoint(0);
        cp.version = 99;
        assert!(matches!(Engine::from_checkpoint(cp), Err(Error::CheckpointVersion(99))));
        let mut cp = e.checkpoint(0);
        cp.totals.transactions = 5;
        assert!(Engine::from_checkpoint(cp).is_err());
    }

    #[test]
    fn replay_rejects_unsorted_unless_asked() {
        let edges = [edge("u", "n", 1, 1), edge("u", "m", 0, 0)];
        let cfg = ReplayConfig::default();
        assert!(matches!(
            replay_daily(&edges, &registry(), &cfg),
            Err(Error::Unsorted { position: 1, .. })
        ));
        let cfg = ReplayConfig { sort: true, ..cfg };
        let out = replay_daily(&edges, &registry(), &cfg).unwrap();
        assert_eq!(out.days.iter().map(|d| d.day).collect::<Vec<_>>(), [0, 1]);
    }

    #[test]
    fn replay_single_day_equals_batch() {
        let edges: Vec<_> = (0..40)
            .map(|i| {
                edge(
                    &format!("u{i}"),
                    &format!("n{}", i % 4),
                    0,
                    u64::from(i % 4 == 0 || i % 7 == 0),
                )
            })
            .collect();
        let cfg = ReplayConfig {
            threshold: 0.5,
            ..Default::default()
        };
        let out = replay_daily(&edges, &registry(), &cfg).unwrap();
        assert_eq!(out.days.len(), 1);

        let accs = amplifier::aggregate(&edges, 2);
        let a = Signal {
            id: registry().id(0).clone(),
            index: 0,
        };
        let batch = amplifier::score_window(&accs, &a).unwrap();
        let flagged = detector::flag_nodes(&batch, 0.5);
        let expected = detector::attach_users(&flagged, &edges, &a, 0);
        assert_eq!(out.days[0].signals[0].outcome.alerts, expected);
        assert_eq!(out.days[0].signals[0].outcome.max_z, Some(batch[0].z));
        // signal b never fires
        assert!(out.days[0].signals[1].skipped.is_some());
    }

    #[test]
    fn replay_empty_input() {
        let out = replay_daily(&[], &registry(), &ReplayConfig::default()).unwrap();
        assert!(out.days.is_empty());
    }
}
