use thiserror::Error;

use crate::signal::{NodeId, SignalId};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty {0}")]
    EmptyId(&'static str),
    #[error("signal {0} is already registered")]
    DuplicateSignal(SignalId),
    #[error("unknown signal {0}")]
    UnknownSignal(String),
    #[error("at most {} signals may be registered", crate::signal::MAX_SIGNALS)]
    TooManySignals,
    #[error("cannot merge accumulators of different nodes ({left} vs {right})")]
    NodeMismatch { left: NodeId, right: NodeId },
    #[error("hit count {hits} exceeds transaction count {transactions}")]
    HitsExceedTransactions { hits: u64, transactions: u64 },
    #[error("no transactions in window; baseline for {0} is undefined")]
    NoBaseline(SignalId),
    #[error("signal {signal} is inactive: global rate {p_global} has no variance")]
    DegenerateBaseline { signal: SignalId, p_global: f64 },
    #[error("global rate {0} has no variance")]
    DegenerateRate(f64),
    #[error("node has no transactions and cannot be scored")]
    Unscorable,
    #[error("node {0} not found")]
    NodeNotFound(NodeId),
    #[error("edges are not sorted by day (day {day} follows day {previous} at position {position})")]
    Unsorted { position: usize, previous: u32, day: u32 },
    #[error("edge for day {day} arrived after window already advanced past it (earliest retained day {earliest})")]
    StaleEdge { day: u32, earliest: u32 },
    #[error("thresholds must be finite and sorted ascending")]
    UnsortedThresholds,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("malformed input at line(s) {}: {detail}", format_lines(.lines))]
    Malformed { lines: Vec<u64>, detail: String },
    #[error("unsupported checkpoint version {0}")]
    CheckpointVersion(u32),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

fn format_lines(lines: &[u64]) -> String {
    lines.iter().map(u64::to_string).collect::<Vec<_>>().join(",")
}
