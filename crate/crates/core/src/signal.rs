//! Vocabulary of the bipartite transaction graph: user and convergence-node
//! identifiers, the weak-signal registry, transaction edges and per-node
//! counters.
//!
//! Every transaction is one Bernoulli trial for every registered signal, so a
//! node carries a single transaction count `t` shared by all signals and one
//! hit count `s` per signal.

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Upper bound on registered signals; hit bits of one edge are packed in a `u64`.
pub const MAX_SIGNALS: usize = 64;

macro_rules! string_id {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(Arc<str>);

        impl $name {
            pub fn new(id: impl AsRef<str>) -> Result<Self> {
                let id = id.as_ref();
                if id.is_empty() {
                    return Err(Error::EmptyId(stringify!($name)));
                }
                Ok(Self(Arc::from(id)))
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl fmt::Debug for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}({:?})", stringify!($name), &*self.0)
            }
        }
    };
}

string_id! {
    /// Initiating side of a transaction (account, rider, card holder).
    UserId
}
string_id! {
    /// Receiving side of a transaction: merchant, driver, or any other
    /// value-receiving entity that attackers must route funds through.
    NodeId
}
string_id! {
    /// Name of a weak signal, e.g. `use_promo`.
    SignalId
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignalDef {
    pub id: SignalId,
    pub description: String,
}

/// Ordered set of weak signals known to a run. Position in the registry is the
/// signal's bit index in [`HitMask`] and its column in the edge file.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<SignalDef>", into = "Vec<SignalDef>")]
pub struct SignalRegistry {
    defs: Vec<SignalDef>,
    index: HashMap<SignalId, usize>,
}

impl From<Vec<SignalDef>> for SignalRegistry {
    fn from(defs: Vec<SignalDef>) -> Self {
        let index = defs.iter().enumerate().map(|(i, d)| (d.id.clone(), i)).collect();
        Self { defs, index }
    }
}

impl From<SignalRegistry> for Vec<SignalDef> {
    fn from(r: SignalRegistry) -> Self {
        r.defs
    }
}

impl SignalRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Convenience constructor registering `ids` in order with empty descriptions.
    pub fn with_signals<I, S>(ids: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut registry = Self::new();
        for id in ids {
            registry.register(SignalId::new(id)?, "")?;
        }
        Ok(registry)
    }

    pub fn register(&mut self, id: SignalId, description: impl Into<String>) -> Result<usize> {
        if self.index.contains_key(&id) {
            return Err(Error::DuplicateSignal(id));
        }
        if self.defs.len() == MAX_SIGNALS {
            return Err(Error::TooManySignals);
        }
        let idx = self.defs.len();
        self.index.insert(id.clone(), idx);
        self.defs.push(SignalDef {
            id,
            description: description.into(),
        });
        Ok(idx)
    }

    pub fn index_of(&self, id: &SignalId) -> Result<usize> {
        self.index
            .get(id)
            .copied()
            .ok_or_else(|| Error::UnknownSignal(id.to_string()))
    }

    pub fn lookup(&self, name: &str) -> Result<usize> {
        self.defs
            .iter()
            .position(|d| d.id.as_str() == name)
            .ok_or_else(|| Error::UnknownSignal(name.to_string()))
    }

    pub fn id(&self, index: usize) -> &SignalId {
        &self.defs[index].id
    }

    pub fn len(&self) -> usize {
        self.defs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.defs.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &SignalDef> {
        self.defs.iter()
    }

    pub fn ids(&self) -> impl Iterator<Item = &SignalId> {
        self.defs.iter().map(|d| &d.id)
    }

    /// Builds a hit mask from named bits. Absent signals default to 0.
    pub fn mask<'a, I>(&self, hits: I) -> Result<HitMask>
    where
        I: IntoIterator<Item = (&'a str, bool)>,
    {
        let mut mask = HitMask::EMPTY;
        for (name, bit) in hits {
            let idx = self.lookup(name)?;
            if bit {
                mask.set(idx);
            }
        }
        Ok(mask)
    }

    /// Constructs an edge, rejecting any hit on a signal this registry does not know.
    pub fn edge<'a, I>(&self, user: UserId, node: NodeId, day: u32, hits: I) -> Result<TransactionEdge>
    where
        I: IntoIterator<Item = (&'a str, bool)>,
    {
        Ok(TransactionEdge {
            user,
            node,
            day,
            hits: self.mask(hits)?,
        })
    }

    /// Rejects masks with bits set beyond the registered signals.
    pub fn check_mask(&self, mask: HitMask) -> Result<()> {
        match mask.highest() {
            Some(bit) if bit >= self.len() => Err(Error::UnknownSignal(format!("bit {bit}"))),
            _ => Ok(()),
        }
    }
}

/// Per-edge signal bits, indexed by registry position.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct HitMask(pub u64);

impl HitMask {
    pub const EMPTY: HitMask = HitMask(0);

    #[inline]
    pub fn get(self, signal: usize) -> bool {
        self.0 >> signal & 1 == 1
    }

    #[inline]
    pub fn set(&mut self, signal: usize) {
        self.0 |= 1 << signal;
    }

    pub fn highest(self) -> Option<usize> {
        (self.0 != 0).then(|| 63 - self.0.leading_zeros() as usize)
    }
}

/// One user→node transaction on a given day with its weak-signal bits.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransactionEdge {
    pub user: UserId,
    pub node: NodeId,
    pub day: u32,
    pub hits: HitMask,
}

impl TransactionEdge {
    #[inline]
    pub fn hit(&self, signal: usize) -> bool {
        self.hits.get(signal)
    }
}

/// Hit and transaction counters for one convergence node.
///
/// `hits[i]` counts transactions carrying signal `i`; `transactions` counts all
/// transactions. Signals past the end of `hits` have zero hits.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeAccumulator {
    pub node: NodeId,
    pub transactions: u64,
    pub hits: Vec<u64>,
}

impl NodeAccumulator {
    pub fn new(node: NodeId, n_signals: usize) -> Self {
        Self {
            node,
            transactions: 0,
            hits: vec![0; n_signals],
        }
    }

    pub fn from_counts(node: NodeId, transactions: u64, hits: Vec<u64>) -> Result<Self> {
        if let Some(&s) = hits.iter().find(|&&s| s > transactions) {
            return Err(Error::HitsExceedTransactions { hits: s, transactions });
        }
        Ok(Self {
            node,
            transactions,
            hits,
        })
    }

    #[inline]
    pub fn hits(&self, signal: usize) -> u64 {
        self.hits.get(signal).copied().unwrap_or(0)
    }

    #[inline]
    pub fn observe(&mut self, hits: HitMask) {
        self.transactions += 1;
        let mut bits = hits.0;
        while bits != 0 {
            let i = bits.trailing_zeros() as usize;
            if i >= self.hits.len() {
                self.hits.resize(i + 1, 0);
            }
            self.hits[i] += 1;
            bits &= bits - 1;
        }
    }

    /// Field-wise sum. Fails when the two accumulators belong to different nodes.
    pub fn merge(&self, other: &NodeAccumulator) -> Result<NodeAccumulator> {
        let mut out = self.clone();
        out.absorb(other)?;
        Ok(out)
    }

    pub fn absorb(&mut self, other: &NodeAccumulator) -> Result<()> {
        if self.node != other.node {
            return Err(Error::NodeMismatch {
                left: self.node.clone(),
                right: other.node.clone(),
            });
        }
        self.transactions += other.transactions;
        if other.hits.len() > self.hits.len() {
            self.hits.resize(other.hits.len(), 0);
        }
        for (a, b) in self.hits.iter_mut().zip(&other.hits) {
            *a += b;
        }
        Ok(())
    }

    /// Inverse of [`absorb`](Self::absorb); used for trailing-window eviction.
    pub(crate) fn retract(&mut self, other: &NodeAccumulator) {
        debug_assert_eq!(self.node, other.node);
        self.transactions -= other.transactions;
        for (a, b) in self.hits.iter_mut().zip(&other.hits) {
            *a -= b;
        }
    }
}

/// Field-wise sum of two accumulators for the same node.
pub fn merge_accumulators(a: &NodeAccumulator, b: &NodeAccumulator) -> Result<NodeAccumulator> {
    a.merge(b)
}

/// Corpus-level counters for one signal: total hits `S`, total transactions
/// `T` and the number of nodes with at least one transaction `A`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GlobalBaseline {
    pub signal: SignalId,
    pub total_hits: u64,
    pub total_transactions: u64,
    pub active_nodes: u64,
}

impl GlobalBaseline {
    /// Global hit rate `S / T`.
    pub fn p_global(&self) -> f64 {
        if self.total_transactions == 0 {
            return 0.0;
        }
        self.total_hits as f64 / self.total_transactions as f64
    }

    /// Prior strength `M`: mean transaction volume over active nodes.
    pub fn prior_strength(&self) -> f64 {
        if self.active_nodes == 0 {
            return 0.0;
        }
        self.total_transactions as f64 / self.active_nodes as f64
    }

    /// A baseline with `p_global` of exactly 0 or 1 has zero variance and
    /// cannot drive a Z-test.
    pub fn is_degenerate(&self) -> bool {
        self.total_hits == 0 || self.total_hits == self.total_transactions
    }
}
