//! Baseline estimation, empirical-Bayes shrinkage and the one-sample
//! proportion Z-test.
//!
//! For a node with `s` hits among `t` transactions, against a global hit rate
//! `p` and prior strength `M` (mean volume per active node):
//!
//! ```text
//! p̃ = (s + M·p) / (t + M)
//! z = (p̃ − p) / sqrt(p·(1 − p) / t)
//! ```
//!
//! Shrinkage adds `M` virtual observations at the baseline rate, so nodes with
//! few transactions are pulled toward `p` while high-volume nodes keep their
//! observed rate. The numerator of `z` uses the shrunk rate, not `s / t`.

use std::borrow::Borrow;
use std::cmp::Ordering;
use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::signal::{GlobalBaseline, NodeAccumulator, NodeId, SignalId, TransactionEdge};

/// A registered signal resolved to its registry position.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Signal {
    pub id: SignalId,
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeScore {
    pub node: NodeId,
    pub signal: SignalId,
    pub hits: u64,
    pub transactions: u64,
    pub raw_rate: f64,
    pub shrunk_rate: f64,
    pub z: f64,
}

/// Ranking order used everywhere: z descending, then node id ascending.
pub fn rank_order(a: &NodeScore, b: &NodeScore) -> Ordering {
    b.z.total_cmp(&a.z).then_with(|| a.node.cmp(&b.node))
}

/// Bipartite aggregation: one accumulator per node that appears in `edges`,
/// sorted by node id. Each edge is one trial for every signal.
pub fn aggregate<'a, I>(edges: I, n_signals: usize) -> Vec<NodeAccumulator>
where
    I: IntoIterator<Item = &'a TransactionEdge>,
{
    let mut nodes: HashMap<&NodeId, NodeAccumulator> = HashMap::new();
    for edge in edges {
        nodes
            .entry(&edge.node)
            .or_insert_with(|| NodeAccumulator::new(edge.node.clone(), n_signals))
            .observe(edge.hits);
    }
    let mut accs: Vec<NodeAccumulator> = nodes.into_values().collect();
    accs.sort_unstable_by(|a, b| a.node.cmp(&b.node));
    accs
}

/// Sums counters for `signal` over all accumulators.
///
/// Counts are integers, so the result does not depend on iteration order.
pub fn compute_baseline<'a, I>(accumulators: I, signal: &Signal) -> Result<GlobalBaseline>
where
    I: IntoIterator<Item = &'a NodeAccumulator>,
{
    let mut baseline = GlobalBaseline {
        signal: signal.id.clone(),
        total_hits: 0,
        total_transactions: 0,
        active_nodes: 0,
    };
    for acc in accumulators {
        baseline.total_hits += acc.hits(signal.index);
        baseline.total_transactions += acc.transactions;
        baseline.active_nodes += u64::from(acc.transactions > 0);
    }
    if baseline.total_transactions == 0 {
        return Err(Error::NoBaseline(signal.id.clone()));
    }
    Ok(baseline)
}

#[inline]
pub fn shrink(hits: u64, transactions: u64, p_global: f64, prior_strength: f64) -> f64 {
    debug_assert!(hits <= transactions);
    debug_assert!((0.0..=1.0).contains(&p_global));
    debug_assert!(prior_strength > 0.0);
    if transactions == 0 {
        return p_global;
    }
    (hits as f64 + prior_strength * p_global) / (transactions as f64 + prior_strength)
}

#[inline]
pub fn z_score(shrunk_rate: f64, p_global: f64, transactions: u64) -> Result<f64> {
    if !(p_global > 0.0 && p_global < 1.0) {
        return Err(Error::DegenerateRate(p_global));
    }
    if transactions == 0 {
        return Err(Error::Unscorable);
    }
    Ok(z_unchecked(shrunk_rate, p_global, transactions))
}

#[inline]
fn z_unchecked(shrunk_rate: f64, p_global: f64, transactions: u64) -> f64 {
    (shrunk_rate - p_global) / (p_global * (1.0 - p_global) / transactions as f64).sqrt()
}

/// Fails with [`Error::DegenerateBaseline`] when the signal never fires or
/// fires on every transaction.
pub fn check_baseline(baseline: &GlobalBaseline) -> Result<()> {
    if baseline.is_degenerate() {
        return Err(Error::DegenerateBaseline {
            signal: baseline.signal.clone(),
            p_global: baseline.p_global(),
        });
    }
    Ok(())
}

/// Scores one node against a validated, non-degenerate baseline.
pub fn score_node(acc: &NodeAccumulator, baseline: &GlobalBaseline, signal: &Signal) -> Result<NodeScore> {
    check_baseline(baseline)?;
    if acc.transactions == 0 {
        return Err(Error::Unscorable);
    }
    Ok(score_unchecked(
        acc,
        signal,
        baseline.p_global(),
        baseline.prior_strength(),
    ))
}

#[inline]
fn score_unchecked(acc: &NodeAccumulator, signal: &Signal, p: f64, m: f64) -> NodeScore {
    let s = acc.hits(signal.index);
    let t = acc.transactions;
    let shrunk = shrink(s, t, p, m);
    NodeScore {
        node: acc.node.clone(),
        signal: signal.id.clone(),
        hits: s,
        transactions: t,
        raw_rate: s as f64 / t as f64,
        shrunk_rate: shrunk,
        z: z_unchecked(shrunk, p, t),
    }
}

/// Scores every node with at least one transaction, ranked by [`rank_order`].
pub fn score_all(
    accumulators: &[NodeAccumulator],
    baseline: &GlobalBaseline,
    signal: &Signal,
) -> Result<Vec<NodeScore>> {
    score_all_with(Exec::default(), accumulators, baseline, signal)
}

pub fn score_all_with<A>(
    exec: Exec,
    accumulators: &[A],
    baseline: &GlobalBaseline,
    signal: &Signal,
) -> Result<Vec<NodeScore>>
where
    A: Borrow<NodeAccumulator> + Sync,
{
    if accumulators.is_empty() {
        return Ok(Vec::new());
    }
    check_baseline(baseline)?;
    let p = baseline.p_global();
    let m = baseline.prior_strength();
    let mut scores: Vec<NodeScore> = exec
        .map(accumulators, |acc| {
            let acc = acc.borrow();
            (acc.transactions > 0).then(|| score_unchecked(acc, signal, p, m))
        })
        .into_iter()
        .flatten()
        .collect();
    scores.sort_unstable_by(rank_order);
    Ok(scores)
}

/// Baseline and scores computed from the same accumulators.
pub fn score_window(accumulators: &[NodeAccumulator], signal: &Signal) -> Result<Vec<NodeScore>> {
    let baseline = compute_baseline(accumulators, signal)?;
    score_all(accumulators, &baseline, signal)
}
