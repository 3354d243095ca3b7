//! Line-oriented scenario files.
//!
//! ```text
//! # six-node desk network
//! config recorders 3
//! config supervisors 1
//! node 1 assessment 90
//! user 10
//! authorize 10
//! upload 10 load 256 at 0
//! share 10 1 upload:1 at 900
//! fault byzantine-validator 4 at 0
//! fault crash-node 2 at 590 for=600
//! run until 1200
//! ```
//!
//! `config` keys: `seed`, `recorders`, `supervisors`, `interval`, `epoch`,
//! `replication`, `units`, `delay`, `tick-seconds`, `network`. `user` declares
//! an external data owner that holds keys and credit but is never ranked into
//! the committee. A digest reference is either `upload:<n>` (the n-th upload
//! or forge-record directive, counting from 1) or 64 hex characters.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::credit::NodeId;
use crate::crypto::Digest;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("line {line}: {message}")]
pub struct ParseError {
    pub line: usize,
    pub message: String,
}

fn err<T>(line: usize, message: impl Into<String>) -> Result<T, ParseError> {
    Err(ParseError {
        line,
        message: message.into(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum FaultKind {
    ForgeRecord,
    TamperChainCopy,
    TamperInFlight,
    CrashNode,
    ByzantineValidator,
    FailStorageUnit,
}

impl FaultKind {
    pub const ALL: [FaultKind; 6] = [
        FaultKind::ForgeRecord,
        FaultKind::TamperChainCopy,
        FaultKind::TamperInFlight,
        FaultKind::CrashNode,
        FaultKind::ByzantineValidator,
        FaultKind::FailStorageUnit,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FaultKind::ForgeRecord => "forge-record",
            FaultKind::TamperChainCopy => "tamper-chain-copy",
            FaultKind::TamperInFlight => "tamper-in-flight",
            FaultKind::CrashNode => "crash-node",
            FaultKind::ByzantineValidator => "byzantine-validator",
            FaultKind::FailStorageUnit => "fail-storage-unit",
        }
    }

    /// Whether the target is a storage unit rather than a node.
    pub fn targets_unit(self) -> bool {
        self == FaultKind::FailStorageUnit
    }
}

impl fmt::Display for FaultKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FaultKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        FaultKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown fault kind '{s}'"))
    }
}

/// One injected fault.
///
/// Parameters by kind:
/// * `forge-record`: `class=<label>` (default `load`), `size=<bytes>` (default 128)
/// * `tamper-chain-copy`: `block=<index>` (default 1), `record=<index>` (default 0)
/// * `crash-node`, `fail-storage-unit`: `for=<ticks>` (default: rest of the run)
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FaultSpec {
    pub kind: FaultKind,
    pub target: u32,
    pub at: u64,
    pub params: BTreeMap<String, String>,
}

impl FaultSpec {
    pub fn new(kind: FaultKind, target: u32, at: u64) -> Self {
        FaultSpec {
            kind,
            target,
            at,
            params: BTreeMap::new(),
        }
    }

    pub fn with(mut self, key: &str, value: impl ToString) -> Self {
        self.params.insert(key.to_string(), value.to_string());
        self
    }

    pub fn param_u64(&self, key: &str) -> Option<u64> {
        self.params.get(key).and_then(|v| v.parse().ok())
    }

    pub fn param(&self, key: &str) -> Option<&str> {
        self.params.get(key).map(String::as_str)
    }
}

impl fmt::Display for FaultSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} at {}", self.kind, self.target, self.at)?;
        for (k, v) in &self.params {
            write!(f, " {k}={v}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DigestRef {
    /// 1-based index into the scenario's uploads.
    Upload(usize),
    Literal(Digest),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Action {
    Upload {
        /// 1-based upload number.
        index: usize,
        node: NodeId,
        data_class: String,
        size: usize,
        forged: bool,
    },
    Share {
        from: NodeId,
        to: NodeId,
        digest: DigestRef,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScheduledAction {
    pub tick: u64,
    pub line: usize,
    pub action: Action,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeDecl {
    pub id: NodeId,
    /// `None` for external users.
    pub assessment: Option<u64>,
    pub line: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Scenario {
    pub settings: Vec<(String, String, usize)>,
    pub nodes: Vec<NodeDecl>,
    pub authorized: Vec<(NodeId, usize)>,
    pub actions: Vec<ScheduledAction>,
    pub faults: Vec<(FaultSpec, usize)>,
    pub run_until: Option<u64>,
}

pub const CONFIG_KEYS: [&str; 10] = [
    "seed",
    "recorders",
    "supervisors",
    "interval",
    "epoch",
    "replication",
    "units",
    "delay",
    "tick-seconds",
    "network",
];

fn num<T: FromStr>(tok: &str, what: &str, line: usize) -> Result<T, ParseError> {
    tok.parse()
        .or_else(|_| err(line, format!("expected {what}, found '{tok}'")))
}

fn expect_at(toks: &[&str], at: usize, line: usize) -> Result<u64, ParseError> {
    match (toks.get(at), toks.get(at + 1)) {
        (Some(&"at"), Some(t)) => num(t, "tick", line),
        _ => err(line, "expected 'at <tick>'"),
    }
}

impl Scenario {
    pub fn parse(text: &str) -> Result<Self, ParseError> {
        let mut sc = Scenario::default();
        let mut uploads = 0usize;
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let toks: Vec<&str> = content.split_whitespace().collect();
            match toks[0] {
                "config" => {
                    let [_, key, value] = toks[..] else {
                        return err(line, "usage: config <key> <value>");
                    };
                    if !CONFIG_KEYS.contains(&key) {
                        return err(line, format!("unknown config key '{key}'"));
                    }
                    sc.settings.push((key.to_string(), value.to_string(), line));
                }
                "node" => {
                    let [_, id, "assessment", score] = toks[..] else {
                        return err(line, "usage: node <id> assessment <n>");
                    };
                    sc.declare(num(id, "node id", line)?, Some(num(score, "assessment", line)?), line)?;
                }
                "user" => {
                    let [_, id] = toks[..] else {
                        return err(line, "usage: user <id>");
                    };
                    sc.declare(num(id, "node id", line)?, None, line)?;
                }
                "authorize" => {
                    let [_, id] = toks[..] else {
                        return err(line, "usage: authorize <id>");
                    };
                    sc.authorized.push((num(id, "node id", line)?, line));
                }
                "upload" => {
                    if toks.len() != 6 {
                        return err(line, "usage: upload <id> <class> <size> at <tick>");
                    }
                    uploads += 1;
                    sc.actions.push(ScheduledAction {
                        tick: expect_at(&toks, 4, line)?,
                        line,
                        action: Action::Upload {
                            index: uploads,
                            node: num(toks[1], "node id", line)?,
                            data_class: toks[2].to_string(),
                            size: num(toks[3], "size", line)?,
                            forged: false,
                        },
                    });
                }
                "share" => {
                    if toks.len() != 6 {
                        return err(line, "usage: share <from> <to> <digest-ref> at <tick>");
                    }
                    let digest = parse_digest_ref(toks[3], line)?;
                    sc.actions.push(ScheduledAction {
                        tick: expect_at(&toks, 4, line)?,
                        line,
                        action: Action::Share {
                            from: num(toks[1], "node id", line)?,
                            to: num(toks[2], "node id", line)?,
                            digest,
                        },
                    });
                }
                "fault" => {
                    if toks.len() < 5 {
                        return err(line, "usage: fault <kind> <target> at <tick> [key=value ...]");
                    }
                    let kind: FaultKind = toks[1].parse().or_else(|m: String| err(line, m))?;
                    let mut spec = FaultSpec::new(kind, num(toks[2], "target id", line)?, expect_at(&toks, 3, line)?);
                    for p in &toks[5..] {
                        let Some((k, v)) = p.split_once('=') else {
                            return err(line, format!("expected key=value, found '{p}'"));
                        };
                        spec.params.insert(k.to_string(), v.to_string());
                    }
                    validate_params(&spec, line)?;
                    if kind == FaultKind::ForgeRecord {
                        uploads += 1;
                        sc.actions.push(ScheduledAction {
                            tick: spec.at,
                            line,
                            action: Action::Upload {
                                index: uploads,
                                node: spec.target,
                                data_class: spec.param("class").unwrap_or("load").to_string(),
                                size: spec.param_u64("size").unwrap_or(128) as usize,
                                forged: true,
                            },
                        });
                    }
                    sc.faults.push((spec, line));
                }
                "run" => {
                    let [_, "until", t] = toks[..] else {
                        return err(line, "usage: run until <tick>");
                    };
                    if sc.run_until.is_some() {
                        return err(line, "duplicate 'run until'");
                    }
                    sc.run_until = Some(num(t, "tick", line)?);
                }
                other => return err(line, format!("unknown directive '{other}'")),
            }
        }
        sc.check_references()?;
        // Stable: equal ticks keep file order.
        sc.actions.sort_by_key(|a| a.tick);
        Ok(sc)
    }

    fn declare(&mut self, id: NodeId, assessment: Option<u64>, line: usize) -> Result<(), ParseError> {
        if self.nodes.iter().any(|n| n.id == id) {
            return err(line, format!("node {id} declared twice"));
        }
        self.nodes.push(NodeDecl { id, assessment, line });
        Ok(())
    }

    fn has_node(&self, id: NodeId) -> bool {
        self.nodes.iter().any(|n| n.id == id)
    }

    fn check_references(&self) -> Result<(), ParseError> {
        for &(id, line) in &self.authorized {
            if !self.has_node(id) {
                return err(line, format!("unknown node {id}"));
            }
        }
        let uploads = self
            .actions
            .iter()
            .filter(|a| matches!(a.action, Action::Upload { .. }))
            .count();
        for a in &self.actions {
            match &a.action {
                Action::Upload { node, data_class, .. } => {
                    if !self.has_node(*node) {
                        return err(a.line, format!("unknown node {node}"));
                    }
                    if data_class.is_empty() || data_class.len() > crate::chain::MAX_DATA_CLASS_LEN {
                        return err(a.line, "data class must be 1..=64 bytes");
                    }
                }
                Action::Share { from, to, digest } => {
                    for id in [from, to] {
                        if !self.has_node(*id) {
                            return err(a.line, format!("unknown node {id}"));
                        }
                    }
                    if let DigestRef::Upload(n) = digest {
                        if *n == 0 || *n > uploads {
                            return err(a.line, format!("no upload number {n}"));
                        }
                    }
                }
            }
        }
        for (spec, line) in &self.faults {
            if !spec.kind.targets_unit() && !self.has_node(spec.target) {
                return err(*line, format!("unknown fault target node {}", spec.target));
            }
        }
        Ok(())
    }

    pub fn setting(&self, key: &str) -> Option<(&str, usize)> {
        self.settings
            .iter()
            .rev()
            .find(|(k, _, _)| k == key)
            .map(|(_, v, l)| (v.as_str(), *l))
    }
}

fn parse_digest_ref(tok: &str, line: usize) -> Result<DigestRef, ParseError> {
    if let Some(n) = tok.strip_prefix("upload:") {
        return Ok(DigestRef::Upload(num(n, "upload number", line)?));
    }
    Digest::from_hex(tok)
        .map(DigestRef::Literal)
        .or_else(|_| err(line, format!("expected upload:<n> or a hex digest, found '{tok}'")))
}

fn validate_params(spec: &FaultSpec, line: usize) -> Result<(), ParseError> {
    let allowed: &[&str] = match spec.kind {
        FaultKind::ForgeRecord => &["class", "size"],
        FaultKind::TamperChainCopy => &["block", "record"],
        FaultKind::CrashNode | FaultKind::FailStorageUnit => &["for"],
        FaultKind::TamperInFlight | FaultKind::ByzantineValidator => &[],
    };
    for (k, v) in &spec.params {
        if !allowed.contains(&k.as_str()) {
            return err(line, format!("{} takes no parameter '{k}'", spec.kind));
        }
        if k != "class" && v.parse::<u64>().is_err() {
            return err(line, format!("parameter {k} must be an integer"));
        }
    }
    Ok(())
}
