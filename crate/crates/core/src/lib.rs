//! Weak-signal structural amplification.
//!
//! Cheap per-transaction binary signals (promo use, device spoofing, ...) are
//! individually poor fraud indicators. Organized attacks, however, funnel the
//! traffic of many accounts through few cash-out nodes, so a signal that is
//! homogeneous across the attackers concentrates at those nodes. This crate
//! aggregates signal hits per node over the user→node transaction graph,
//! smooths the per-node rate toward the global rate, and flags nodes whose
//! rate deviates significantly under a proportion Z-test.
//!
//! Modules:
//! - [`signal`]: identifiers, signal registry, edges and node counters.
//! - [`amplifier`]: aggregation, baseline, shrinkage and Z-scores.
//! - [`detector`]: thresholds, alerts with suspicious users, multi-signal composition.
//! - [`engine`]: incremental state, trailing windows, checkpoints, daily replay.
//! - [`scenario`]: seeded synthetic incidents with ground truth.
//! - [`backtest`]: precision / recall metrics, sweeps and time series.
//! - [`io`]: edge and ground-truth file formats.

pub mod amplifier;
pub mod backtest;
pub mod detector;
pub mod engine;
pub mod error;
pub mod exec;
pub mod io;
pub mod scenario;
pub mod signal;

pub use amplifier::{aggregate, compute_baseline, score_all, shrink, z_score, NodeScore, Signal};
pub use detector::{attach_users, compose_signals, flag_nodes, ActivationReport, Alert};
pub use engine::{replay_daily, Engine, ReplayConfig, WindowConfig};
pub use error::{Error, Result};
pub use exec::Exec;
pub use scenario::{generate, GroundTruth, ScenarioConfig};
pub use signal::{
    merge_accumulators, GlobalBaseline, HitMask, NodeAccumulator, NodeId, SignalId, SignalRegistry, TransactionEdge,
    UserId,
};
