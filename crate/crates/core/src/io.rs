//! Edge and ground-truth files.
//!
//! Edge file: comma-separated text with a header row
//! `user,node,day,<signal_1>,...,<signal_n>`; signal columns hold `0` or `1`
//! and their order defines the signal registry. Ground truth: one JSON object
//! (see [`GroundTruth`]).

use std::collections::HashMap;
use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::scenario::GroundTruth;
use crate::signal::{HitMask, NodeId, SignalRegistry, TransactionEdge, UserId};

const FIXED_COLUMNS: [&str; 3] = ["user", "node", "day"];
/// Malformed-line reports stop listing line numbers after this many.
const MAX_REPORTED_LINES: usize = 20;

pub fn write_edges<W: Write>(out: W, registry: &SignalRegistry, edges: &[TransactionEdge]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<&str> = FIXED_COLUMNS.to_vec();
    header.extend(registry.ids().map(|id| id.as_str()));
    w.write_record(&header)?;
    for e in edges {
        let day = e.day.to_string();
        let mut record: Vec<&str> = Vec::with_capacity(header.len());
        record.extend([e.user.as_str(), e.node.as_str(), day.as_str()]);
        record.extend((0..registry.len()).map(|i| if e.hit(i) { "1" } else { "0" }));
        w.write_record(&record)?;
    }
    w.flush()?;
    Ok(())
}

/// Shares one allocation per distinct identifier.
#[derive(Default)]
struct Interner {
    users: HashMap<Box<str>, UserId>,
    nodes: HashMap<Box<str>, NodeId>,
}

impl Interner {
    fn user(&mut self, s: &str) -> Result<UserId> {
        if let Some(id) = self.users.get(s) {
            return Ok(id.clone());
        }
        let id = UserId::new(s)?;
        self.users.insert(s.into(), id.clone());
        Ok(id)
    }

    fn node(&mut self, s: &str) -> Result<NodeId> {
        if let Some(id) = self.nodes.get(s) {
            return Ok(id.clone());
        }
        let id = NodeId::new(s)?;
        self.nodes.insert(s.into(), id.clone());
        Ok(id)
    }
}

/// Reads an edge file. Every malformed record is reported by line number.
pub fn read_edges<R: Read>(input: R) -> Result<(SignalRegistry, Vec<TransactionEdge>)> {
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_reader(input);
    let header = reader.headers().map_err(|e| malformed(1, e.to_string()))?.clone();
    if header.len() < 3 || header.iter().take(3).ne(FIXED_COLUMNS) {
        return Err(malformed(
            1,
            format!("header must start with {}", FIXED_COLUMNS.join(",")),
        ));
    }
    let registry = SignalRegistry::with_signals(header.iter().skip(3)).map_err(|e| malformed(1, e.to_string()))?;
    let width = header.len();

    let mut interner = Interner::default();
    let mut edges = Vec::new();
    let mut bad: Vec<u64> = Vec::new();
    let mut first_detail: Option<String> = None;
    let mut record = csv::StringRecord::new();
    loop {
        let line = reader.position().line();
        match reader.read_record(&mut record) {
            Ok(false) => break,
            Ok(true) => {}
            Err(e) => {
                bad.push(e.position().map_or(line, |p| p.line()));
                first_detail.get_or_insert_with(|| e.to_string());
                continue;
            }
        }
        let line = record.position().map_or(line, |p| p.line());
        match parse_record(&record, width, &mut interner) {
            Ok(edge) => edges.push(edge),
            Err(detail) => {
                bad.push(line);
                first_detail.get_or_insert(detail);
            }
        }
    }
    if !bad.is_empty() {
        let total = bad.len();
        bad.truncate(MAX_REPORTED_LINES);
        let mut detail = first_detail.unwrap_or_default();
        if total > MAX_REPORTED_LINES {
            detail.push_str(&format!(" ({total} malformed lines in total)"));
        }
        return Err(Error::Malformed { lines: bad, detail });
    }
    Ok((registry, edges))
}

fn parse_record(
    record: &csv::StringRecord,
    width: usize,
    interner: &mut Interner,
) -> std::result::Result<TransactionEdge, String> {
    if record.len() != width {
        return Err(format!("expected {width} fields, found {}", record.len()));
    }
    let user = interner.user(&record[0]).map_err(|e| e.to_string())?;
    let node = interner.node(&record[1]).map_err(|e| e.to_string())?;
    let day: u32 = record[2]
        .trim()
        .parse()
        .map_err(|_| format!("bad day {:?}", &record[2]))?;
    let mut hits = HitMask::EMPTY;
    for (i, field) in record.iter().skip(3).enumerate() {
        match field.trim() {
            "0" => {}
            "1" => hits.set(i),
            other => return Err(format!("bad signal bit {other:?}")),
        }
    }
    Ok(TransactionEdge { user, node, day, hits })
}

fn malformed(line: u64, detail: String) -> Error {
    Error::Malformed {
        lines: vec![line],
        detail,
    }
}

pub fn write_truth<W: Write>(out: W, truth: &GroundTruth) -> Result<()> {
    serde_json::to_writer_pretty(out, truth)?;
    Ok(())
}

pub fn read_truth<R: Read>(input: R) -> Result<GroundTruth> {
    Ok(serde_json::from_reader(input)?)
}
