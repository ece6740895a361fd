//! Turning node scores into alerts: thresholding, suspicious-user attachment
//! and composition of independently produced per-signal results.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::amplifier::{rank_order, NodeScore, Signal};
use crate::error::Result;
use crate::signal::{NodeId, SignalId, TransactionEdge, UserId};

/// A flagged convergence node together with the users whose signal-carrying
/// transactions reached it inside the scoring window.
#[derive(Debug, Clone, PartialEq)]
pub struct Alert {
    pub day: u32,
    pub signal: SignalId,
    pub node: NodeId,
    pub z: f64,
    pub hits: u64,
    pub transactions: u64,
    pub suspicious_users: BTreeSet<UserId>,
}

/// Wire layout of an alert; field order is part of the format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlertRecord {
    pub day: u32,
    pub signal: SignalId,
    pub node: NodeId,
    pub z: f64,
    pub s: u64,
    pub t: u64,
    pub user_count: usize,
    pub users: Vec<UserId>,
}

impl From<&Alert> for AlertRecord {
    fn from(a: &Alert) -> Self {
        AlertRecord {
            day: a.day,
            signal: a.signal.clone(),
            node: a.node.clone(),
            z: a.z,
            s: a.hits,
            t: a.transactions,
            user_count: a.suspicious_users.len(),
            users: a.suspicious_users.iter().cloned().collect(),
        }
    }
}

impl Alert {
    pub fn to_record(&self) -> AlertRecord {
        self.into()
    }
}

/// Writes one JSON object per line.
pub fn write_alerts<'a, W, I>(mut out: W, alerts: I) -> Result<()>
where
    W: Write,
    I: IntoIterator<Item = &'a Alert>,
{
    for alert in alerts {
        serde_json::to_writer(&mut out, &alert.to_record())?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Scores with `z >= threshold`, in ranking order.
pub fn flag_nodes(scores: &[NodeScore], threshold: f64) -> Vec<NodeScore> {
    let mut flagged: Vec<NodeScore> = scores.iter().filter(|s| s.z >= threshold).cloned().collect();
    flagged.sort_by(rank_order);
    flagged
}

/// Builds one alert per flagged node. A user is attached when at least one of
/// their transactions to the node inside `edges` carries `signal`.
pub fn attach_users<'a, I>(flagged: &[NodeScore], edges: I, signal: &Signal, day: u32) -> Vec<Alert>
where
    I: IntoIterator<Item = &'a TransactionEdge>,
{
    if flagged.is_empty() {
        return Vec::new();
    }
    let wanted: HashSet<&NodeId> = flagged.iter().map(|s| &s.node).collect();
    let mut users: BTreeMap<&NodeId, BTreeSet<UserId>> = BTreeMap::new();
    for edge in edges {
        if edge.hit(signal.index) && wanted.contains(&edge.node) {
            users.entry(&edge.node).or_default().insert(edge.user.clone());
        }
    }
    flagged
        .iter()
        .map(|score| Alert {
            day,
            signal: score.signal.clone(),
            node: score.node.clone(),
            z: score.z,
            hits: score.hits,
            transactions: score.transactions,
            suspicious_users: users.remove(&score.node).unwrap_or_default(),
        })
        .collect()
}

/// Per-signal result of one scoring turn.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalOutcome {
    pub signal: SignalId,
    /// `None` when the signal could not be scored (no or degenerate baseline).
    pub max_z: Option<f64>,
    pub alerts: Vec<Alert>,
}

impl SignalOutcome {
    pub fn flagged_users(&self) -> BTreeSet<UserId> {
        self.alerts
            .iter()
            .flat_map(|a| a.suspicious_users.iter().cloned())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Activation {
    pub signal: SignalId,
    pub max_z: Option<f64>,
    pub active: bool,
}

/// Which signals crossed the threshold, and by how much.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationReport {
    pub threshold: f64,
    pub signals: Vec<Activation>,
}

impl ActivationReport {
    pub fn new(threshold: f64) -> Self {
        Self {
            threshold,
            signals: Vec::new(),
        }
    }

    /// Folds a new observation of `signal` into the running maximum.
    pub fn observe(&mut self, signal: &SignalId, z: Option<f64>) {
        let threshold = self.threshold;
        let entry = match self.signals.iter_mut().find(|a| &a.signal == signal) {
            Some(entry) => entry,
            None => {
                self.signals.push(Activation {
                    signal: signal.clone(),
                    max_z: None,
                    active: false,
                });
                self.signals.last_mut().expect("just pushed")
            }
        };
        if let Some(z) = z {
            entry.max_z = Some(entry.max_z.map_or(z, |m| m.max(z)));
        }
        entry.active = entry.max_z.is_some_and(|m| m >= threshold);
    }

    pub fn merge(&mut self, other: &ActivationReport) {
        for a in &other.signals {
            self.observe(&a.signal, a.max_z);
        }
    }

    pub fn get(&self, signal: &str) -> Option<&Activation> {
        self.signals.iter().find(|a| a.signal.as_str() == signal)
    }

    pub fn active_signals(&self) -> impl Iterator<Item = &SignalId> {
        self.signals.iter().filter(|a| a.active).map(|a| &a.signal)
    }
}

/// Union of the per-signal detections of one window.
#[derive(Debug, Clone, PartialEq)]
pub struct Incident {
    pub users: BTreeSet<UserId>,
    pub nodes: BTreeSet<NodeId>,
    pub report: ActivationReport,
}

pub fn compose_signals(outcomes: &[SignalOutcome], threshold: f64) -> Incident {
    let mut incident = Incident {
        users: BTreeSet::new(),
        nodes: BTreeSet::new(),
        report: ActivationReport::new(threshold),
    };
    for outcome in outcomes {
        incident.report.observe(&outcome.signal, outcome.max_z);
        for alert in &outcome.alerts {
            incident.nodes.insert(alert.node.clone());
            incident.users.extend(alert.suspicious_users.iter().cloned());
        }
    }
    incident
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::HitMask;

    fn score(node: &str, z: f64) -> NodeScore {
        NodeScore {
            node: NodeId::new(node).unwrap(),
            signal: SignalId::new("sig").unwrap(),
            hits: 1,
            transactions: 2,
            raw_rate: 0.5,
            shrunk_rate: 0.4,
            z,
        }
    }

    fn sig() -> Signal {
        Signal {
            id: SignalId::new("sig").unwrap(),
            index: 0,
        }
    }

    fn edge(user: &str, node: &str, hit: bool) -> TransactionEdge {
        TransactionEdge {
            user: UserId::new(user).unwrap(),
            node: NodeId::new(node).unwrap(),
            day: 0,
            hits: HitMask(hit as u64),
        }
    }

    fn users(names: &[&str]) -> BTreeSet<UserId> {
        names.iter().map(|n| UserId::new(n).unwrap()).collect()
    }

    fn outcome(name: &str, max_z: Option<f64>, user_sets: &[&[&str]]) -> SignalOutcome {
        SignalOutcome {
            signal: SignalId::new(name).unwrap(),
            max_z,
            alerts: user_sets
                .iter()
                .enumerate()
                .map(|(i, u)| Alert {
                    day: 0,
                    signal: SignalId::new(name).unwrap(),
                    node: NodeId::new(format!("n{i}")).unwrap(),
                    z: max_z.unwrap_or(0.0),
                    hits: 1,
                    transactions: 1,
                    suspicious_users: users(u),
                })
                .collect(),
        }
    }

    #[test]
    fn flag_threshold() {
        let flagged = flag_nodes(&[score("b", 10.0), score("a", 50.0)], 40.0);
        assert_eq!(flagged.len(), 1);
        assert_eq!(flagged[0].node.as_str(), "a");
        assert!(flag_nodes(&[], 40.0).is_empty());
    }

    #[test]
    fn flag_is_inclusive_and_ordered() {
        let flagged = flag_nodes(&[score("c", 40.0), score("b", 41.0), score("a", 40.0)], 40.0);
        let ids: Vec<_> = flagged.iter().map(|s| s.node.as_str()).collect();
        assert_eq!(ids, ["b", "a", "c"]);
    }

    #[test]
    fn attach_dedups_and_filters_hits() {
        let edges = [
            edge("u1", "a", true),
            edge("u2", "a", false),
            edge("u1", "a", true),
            edge("u3", "b", true),
        ];
        let alerts = attach_users(&[score("a", 50.0)], &edges, &sig(), 3);
        assert_eq!(alerts.len(), 1);
        assert_eq!(alerts[0].suspicious_users, users(&["u1"]));
        assert_eq!(alerts[0].day, 3);
    }

    #[test]
    fn attach_without_hit_edges_is_empty() {
        let edges = [edge("u2", "a", false)];
        let alerts = attach_users(&[score("a", -1.0)], &edges, &sig(), 0);
        assert!(alerts[0].suspicious_users.is_empty());
    }

    #[test]
    fn compose_unions_users() {
        let incident = compose_signals(
            &[
                outcome("A", Some(50.0), &[&["u1", "u2"]]),
                outcome("B", Some(45.0), &[&["u2", "u3"]]),
            ],
            40.0,
        );
        assert_eq!(incident.users, users(&["u1", "u2", "u3"]));
        assert!(incident.report.get("A").unwrap().active);
    }

    #[test]
    fn compose_marks_weak_signal_inactive() {
        let incident = compose_signals(&[outcome("A", Some(12.0), &[])], 40.0);
        let a = incident.report.get("A").unwrap();
        assert_eq!(a.max_z, Some(12.0));
        assert!(!a.active);

        let incident = compose_signals(&[outcome("B", None, &[])], 40.0);
        assert!(!incident.report.get("B").unwrap().active);
    }

    #[test]
    fn report_merge_takes_maximum() {
        let mut r = ActivationReport::new(40.0);
        r.observe(&SignalId::new("A").unwrap(), Some(10.0));
        let mut other = ActivationReport::new(40.0);
        other.observe(&SignalId::new("A").unwrap(), Some(55.0));
        other.observe(&SignalId::new("B").unwrap(), None);
        r.merge(&other);
        assert_eq!(r.get("A").unwrap().max_z, Some(55.0));
        assert!(r.get("A").unwrap().active);
        assert_eq!(r.active_signals().count(), 1);
    }

    #[test]
    fn alert_serialization_is_stable() {
        let edges = [edge("u2", "a", true), edge("u1", "a", true)];
        let alerts = attach_users(&[score("a", 50.5)], &edges, &sig(), 7);
        let mut buf = Vec::new();
        write_alerts(&mut buf, &alerts).unwrap();
        let line = String::from_utf8(buf).unwrap();
        assert_eq!(
            line,
            "{\"day\":7,\"signal\":\"sig\",\"node\":\"a\",\"z\":50.5,\"s\":1,\"t\":2,\"user_count\":2,\"users\":[\"u1\",\"u2\"]}\n"
        );
        let back: AlertRecord = serde_json::from_str(line.trim()).unwrap();
        assert_eq!(back, alerts[0].to_record());
    }
}
