use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::chain::{Chain, Record, Violation};
use crate::credit::{CreditLedger, NodeId, Role, RoleAssignment};
use crate::crypto::{self, Digest, Envelope};
use crate::datastore::AuditReport;

use super::scenario::{FaultKind, FaultSpec};
use super::SimConfig;

pub const TRACE_HEADER: &str = "tick\tevent\tsrc\tdst\tdetail";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuarantineEntry {
    pub tick: u64,
    pub round: u64,
    pub proposer: NodeId,
    pub record: Record,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoleSnapshot {
    pub tick: u64,
    pub assignment: RoleAssignment,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum FaultOutcome {
    /// The system noticed and contained the fault.
    Detected,
    /// Nothing to detect; the system kept working.
    Tolerated,
    Missed,
    /// The fault never took effect within the run.
    NotTriggered,
}

impl FaultOutcome {
    pub fn name(self) -> &'static str {
        match self {
            FaultOutcome::Detected => "detected",
            FaultOutcome::Tolerated => "tolerated",
            FaultOutcome::Missed => "missed",
            FaultOutcome::NotTriggered => "not-triggered",
        }
    }

    pub fn handled(self) -> bool {
        matches!(self, FaultOutcome::Detected | FaultOutcome::Tolerated)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FaultReport {
    pub spec: FaultSpec,
    pub outcome: FaultOutcome,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShareAttempt {
    pub tick: u64,
    pub from: NodeId,
    pub to: NodeId,
    pub digest: Option<Digest>,
    /// `sent`, or the reason the sender refused.
    pub outcome: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShareDelivery {
    pub tick: u64,
    pub sender: NodeId,
    pub receiver: NodeId,
    pub digest: Digest,
    /// Decrypted bytes equal the owner's original payload.
    pub exact: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CapturedMessage {
    pub sent_tick: u64,
    pub src: NodeId,
    pub dst: NodeId,
    pub kind: &'static str,
    pub bytes: Vec<u8>,
    pub envelopes: Vec<Envelope>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SimStats {
    pub messages_sent: u64,
    pub messages_delivered: u64,
    pub messages_dropped: u64,
    pub uploads_started: u64,
    pub uploads_denied: u64,
    pub uploads_accepted: u64,
    pub upload_rejections: BTreeMap<String, u64>,
    pub share_rejections: BTreeMap<String, u64>,
    pub blocks_proposed: u64,
    pub blocks_committed: u64,
    pub blocks_rejected: u64,
    pub proposals_lapsed: u64,
    pub rounds_skipped: u64,
    pub commit_errors: u64,
    pub append_failures: u64,
    pub store_failures: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SimReport {
    pub config: SimConfig,
    pub final_tick: u64,
    pub chain: Chain,
    /// `verify()` of every node's own chain copy.
    pub node_verification: BTreeMap<NodeId, Result<(), Violation>>,
    /// Whether each node's copy equals the committed chain.
    pub node_agrees: BTreeMap<NodeId, bool>,
    pub ledger: CreditLedger,
    pub roles: Vec<RoleSnapshot>,
    pub quarantine: Vec<QuarantineEntry>,
    pub audit: AuditReport,
    pub faults: Vec<FaultReport>,
    pub shares: Vec<ShareAttempt>,
    pub deliveries: Vec<ShareDelivery>,
    pub pending_at_end: usize,
    pub stats: SimStats,
    pub trace: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub final_tick: u64,
    pub blocks_committed: usize,
    pub blocks_rejected: u64,
    pub proposals_lapsed: u64,
    pub rounds_skipped: u64,
    pub records_committed: usize,
    pub records_quarantined: usize,
    pub uploads_rejected: u64,
    pub uploads_denied: u64,
    pub pending_at_end: usize,
    pub credit_min: i64,
    pub credit_max: i64,
    pub credit_mean: f64,
    /// `(epoch, tick, nodes whose role changed)` for every re-election.
    pub role_churn: Vec<(u64, u64, usize)>,
    /// Per kind: `(handled, triggered)`.
    pub detection: BTreeMap<FaultKind, (usize, usize)>,
    pub messages_delivered: u64,
    pub messages_dropped: u64,
}

impl Metrics {
    pub fn detection_rate(&self, kind: FaultKind) -> Option<f64> {
        self.detection
            .get(&kind)
            .filter(|(_, n)| *n > 0)
            .map(|(h, n)| *h as f64 / *n as f64)
    }
}

fn role_map(a: &RoleAssignment) -> BTreeMap<NodeId, Role> {
    a.members().filter_map(|id| a.role_of(id).map(|r| (id, r))).collect()
}

impl SimReport {
    pub fn chain_export(&self) -> String {
        self.chain.export()
    }

    pub fn credit_log(&self) -> String {
        self.ledger.export_log()
    }

    pub fn trace_text(&self) -> String {
        let mut out = String::from(TRACE_HEADER);
        out.push('\n');
        for l in &self.trace {
            out.push_str(l);
            out.push('\n');
        }
        out
    }

    pub fn current_roles(&self) -> &RoleAssignment {
        &self.roles.last().expect("roles are initialized at start").assignment
    }

    /// Every role snapshot, one row per node, sorted by epoch then node.
    pub fn roles_text(&self) -> String {
        let mut out = String::from("epoch\ttick\tnode_id\trole\n");
        for snap in &self.roles {
            for (id, role) in role_map(&snap.assignment) {
                let _ = writeln!(out, "{}\t{}\t{}\t{}", snap.assignment.epoch, snap.tick, id, role.name());
            }
        }
        out
    }

    pub fn audit_text(&self) -> String {
        self.audit.render()
    }

    pub fn quarantine_text(&self) -> String {
        let mut out = String::from("tick\tround\tproposer\tuploader\tdigest\tclass\n");
        for q in &self.quarantine {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}",
                q.tick,
                q.round,
                q.proposer,
                self.ledger
                    .node_by_key(&q.record.uploader)
                    .map_or_else(|| q.record.uploader.short(), |id| id.to_string()),
                q.record.payload_digest,
                q.record.metadata.data_class.as_str()
            );
        }
        out
    }

    pub fn faults_text(&self) -> String {
        let mut out = String::from("kind\ttarget\tat\toutcome\tdetail\n");
        for f in &self.faults {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}",
                f.spec.kind,
                f.spec.target,
                f.spec.at,
                f.outcome.name(),
                f.detail
            );
        }
        out
    }

    pub fn metrics(&self) -> Metrics {
        let credits = self.ledger.credits();
        let (credit_min, credit_max) = (
            credits.values().copied().min().unwrap_or(0),
            credits.values().copied().max().unwrap_or(0),
        );
        let credit_mean = if credits.is_empty() {
            0.0
        } else {
            credits.values().sum::<i64>() as f64 / credits.len() as f64
        };
        let role_churn = self
            .roles
            .windows(2)
            .map(|w| {
                let (a, b) = (role_map(&w[0].assignment), role_map(&w[1].assignment));
                let changed = b.iter().filter(|(id, r)| a.get(id) != Some(r)).count();
                (w[1].assignment.epoch, w[1].tick, changed)
            })
            .collect();
        let mut detection: BTreeMap<FaultKind, (usize, usize)> = BTreeMap::new();
        for f in &self.faults {
            let e = detection.entry(f.spec.kind).or_default();
            if f.outcome != FaultOutcome::NotTriggered {
                e.1 += 1;
                if f.outcome.handled() {
                    e.0 += 1;
                }
            }
        }
        Metrics {
            final_tick: self.final_tick,
            blocks_committed: self.chain.len().saturating_sub(1),
            blocks_rejected: self.stats.blocks_rejected,
            proposals_lapsed: self.stats.proposals_lapsed,
            rounds_skipped: self.stats.rounds_skipped,
            records_committed: self.chain.records().count(),
            records_quarantined: self.quarantine.len(),
            uploads_rejected: self.stats.upload_rejections.values().sum(),
            uploads_denied: self.stats.uploads_denied,
            pending_at_end: self.pending_at_end,
            credit_min,
            credit_max,
            credit_mean,
            role_churn,
            detection,
            messages_delivered: self.stats.messages_delivered,
            messages_dropped: self.stats.messages_dropped,
        }
    }

    pub fn metrics_text(&self) -> String {
        let m = self.metrics();
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k}\t{v}");
        };
        kv("seed", self.config.seed.to_string());
        kv(
            "final_tick",
            format!("{} ({})", m.final_tick, self.config.render_tick(m.final_tick)),
        );
        kv("nodes", self.ledger.profiles().count().to_string());
        kv("blocks_committed", m.blocks_committed.to_string());
        kv("blocks_rejected", m.blocks_rejected.to_string());
        kv("proposals_lapsed", m.proposals_lapsed.to_string());
        kv("rounds_skipped", m.rounds_skipped.to_string());
        kv("records_committed", m.records_committed.to_string());
        kv("records_quarantined", m.records_quarantined.to_string());
        kv("uploads_rejected", m.uploads_rejected.to_string());
        kv("uploads_denied", m.uploads_denied.to_string());
        kv("pending_at_end", m.pending_at_end.to_string());
        kv("credit_min", m.credit_min.to_string());
        kv("credit_max", m.credit_max.to_string());
        kv("credit_mean", format!("{:.3}", m.credit_mean));
        for (id, c) in self.ledger.credits() {
            kv(&format!("credit.{id}"), c.to_string());
        }
        for (epoch, tick, changed) in &m.role_churn {
            kv(&format!("role_churn.epoch{epoch}"), format!("{changed} (tick {tick})"));
        }
        for (kind, (handled, triggered)) in &m.detection {
            kv(&format!("detection.{kind}"), format!("{handled}/{triggered}"));
        }
        kv("messages_delivered", m.messages_delivered.to_string());
        kv("messages_dropped", m.messages_dropped.to_string());
        let agree = self.node_agrees.values().filter(|a| **a).count();
        kv("nodes_agreeing", format!("{agree}/{}", self.node_agrees.len()));
        out
    }

    /// Digest over every rendered artifact; equal for equal runs.
    pub fn fingerprint(&self) -> Digest {
        crypto::digest_parts(&[
            self.chain_export().as_bytes(),
            self.credit_log().as_bytes(),
            self.trace_text().as_bytes(),
            self.roles_text().as_bytes(),
            self.audit_text().as_bytes(),
            self.quarantine_text().as_bytes(),
            self.faults_text().as_bytes(),
            self.metrics_text().as_bytes(),
        ])
    }
}
