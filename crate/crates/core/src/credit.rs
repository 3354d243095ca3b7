//! Credit scores and role assignment.
//!
//! Every node starts with the same credit. Each audited event moves one node
//! by exactly one point. Roles are assigned by ranking: the top `max_recorders`
//! nodes record, the next `max_supervisors` supervise, the rest are
//! candidates. The first ranking uses the scenario's assessment scores, every
//! later one uses credit; ties always go to the lower node id.

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

use crate::crypto::PublicKey;

pub type NodeId = u32;

pub const DEFAULT_MAX_RECORDERS: usize = 101;
pub const DEFAULT_MAX_SUPERVISORS: usize = 20;
pub const DEFAULT_EPOCH_LENGTH_BLOCKS: u64 = 10;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CreditError {
    #[error("at least one recorder is required (nodes: {nodes}, max recorders: {max_recorders})")]
    NoRecorders { nodes: usize, max_recorders: usize },
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("duplicate node id {0}")]
    DuplicateNode(NodeId),
    #[error("vote count must be odd and non-zero, got {0}")]
    VoteCount(usize),
    #[error("recorder set is empty")]
    EmptyRecorderSet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Role {
    Recorder,
    Supervisor,
    Candidate,
    /// Data owner outside the committee; never ranked.
    External,
}

impl Role {
    pub fn name(self) -> &'static str {
        match self {
            Role::Recorder => "recorder",
            Role::Supervisor => "supervisor",
            Role::Candidate => "candidate",
            Role::External => "external",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeProfile {
    pub node_id: NodeId,
    pub public_key: PublicKey,
    pub credit: i64,
    pub role: Role,
    pub assessment: u64,
}

impl NodeProfile {
    pub fn new(node_id: NodeId, public_key: PublicKey, assessment: u64) -> Self {
        NodeProfile {
            node_id,
            public_key,
            credit: 0,
            role: Role::Candidate,
            assessment,
        }
    }

    pub fn external(node_id: NodeId, public_key: PublicKey) -> Self {
        NodeProfile {
            role: Role::External,
            ..NodeProfile::new(node_id, public_key, 0)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CommitteeConfig {
    pub max_recorders: usize,
    pub max_supervisors: usize,
    pub initial_credit: i64,
    pub epoch_length_blocks: u64,
}

impl Default for CommitteeConfig {
    fn default() -> Self {
        CommitteeConfig {
            max_recorders: DEFAULT_MAX_RECORDERS,
            max_supervisors: DEFAULT_MAX_SUPERVISORS,
            initial_credit: 0,
            epoch_length_blocks: DEFAULT_EPOCH_LENGTH_BLOCKS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RoleAssignment {
    pub recorders: Vec<NodeId>,
    pub supervisors: Vec<NodeId>,
    pub candidates: Vec<NodeId>,
    pub epoch: u64,
}

impl RoleAssignment {
    /// Split a ranking into the three tiers.
    pub fn from_ranking(ranked: &[NodeId], config: &CommitteeConfig, epoch: u64) -> Self {
        let r = config.max_recorders.min(ranked.len());
        let s = config.max_supervisors.min(ranked.len() - r);
        RoleAssignment {
            recorders: ranked[..r].to_vec(),
            supervisors: ranked[r..r + s].to_vec(),
            candidates: ranked[r + s..].to_vec(),
            epoch,
        }
    }

    pub fn role_of(&self, id: NodeId) -> Option<Role> {
        if self.recorders.contains(&id) {
            Some(Role::Recorder)
        } else if self.supervisors.contains(&id) {
            Some(Role::Supervisor)
        } else if self.candidates.contains(&id) {
            Some(Role::Candidate)
        } else {
            None
        }
    }

    pub fn members(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.recorders
            .iter()
            .chain(&self.supervisors)
            .chain(&self.candidates)
            .copied()
    }

    pub fn len(&self) -> usize {
        self.recorders.len() + self.supervisors.len() + self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Recorder on duty for `round`: strict round-robin.
    pub fn duty_recorder(&self, round: u64) -> Result<NodeId, CreditError> {
        if self.recorders.is_empty() {
            return Err(CreditError::EmptyRecorderSet);
        }
        Ok(self.recorders[(round % self.recorders.len() as u64) as usize])
    }

    /// Supervisor on duty for `round`, if any supervisors exist.
    pub fn duty_supervisor(&self, round: u64) -> Option<NodeId> {
        if self.supervisors.is_empty() {
            None
        } else {
            Some(self.supervisors[(round % self.supervisors.len() as u64) as usize])
        }
    }
}

/// Sort ids by `score` descending, then id ascending.
pub fn rank_by<F: Fn(NodeId) -> i128>(ids: impl IntoIterator<Item = NodeId>, score: F) -> Vec<NodeId> {
    let mut ids: Vec<NodeId> = ids.into_iter().collect();
    ids.sort_by(|a, b| score(*b).cmp(&score(*a)).then(a.cmp(b)));
    ids
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum CreditReason {
    RecordCorrect,
    RecordErroneous,
    BlockClean,
    BlockErroneous,
    ValidatorAgreed,
    ValidatorDissented,
}

impl CreditReason {
    pub fn delta(self) -> i64 {
        match self {
            CreditReason::RecordCorrect | CreditReason::BlockClean | CreditReason::ValidatorAgreed => 1,
            CreditReason::RecordErroneous
            | CreditReason::BlockErroneous
            | CreditReason::ValidatorDissented => -1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            CreditReason::RecordCorrect => "record-correct",
            CreditReason::RecordErroneous => "record-erroneous",
            CreditReason::BlockClean => "block-clean",
            CreditReason::BlockErroneous => "block-erroneous",
            CreditReason::ValidatorAgreed => "validator-agreed",
            CreditReason::ValidatorDissented => "validator-dissented",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [
            CreditReason::RecordCorrect,
            CreditReason::RecordErroneous,
            CreditReason::BlockClean,
            CreditReason::BlockErroneous,
            CreditReason::ValidatorAgreed,
            CreditReason::ValidatorDissented,
        ]
        .into_iter()
        .find(|r| r.name() == s)
    }
}

impl fmt::Display for CreditReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CreditEvent {
    pub node_id: NodeId,
    pub delta: i64,
    pub reason: CreditReason,
    pub tick: u64,
}

impl CreditEvent {
    /// `tick\tnode_id\tdelta\treason`
    pub fn to_tsv(&self) -> String {
        format!("{}\t{}\t{:+}\t{}", self.tick, self.node_id, self.delta, self.reason)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Verdict {
    Ok,
    Erroneous,
}

/// Majority verdict of a validation round and the credit events it produced.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidationOutcome {
    pub verdict: Verdict,
    pub events: Vec<CreditEvent>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CreditLedger {
    profiles: BTreeMap<NodeId, NodeProfile>,
    log: Vec<CreditEvent>,
}

impl CreditLedger {
    pub fn new(profiles: impl IntoIterator<Item = NodeProfile>) -> Result<Self, CreditError> {
        let mut map = BTreeMap::new();
        for p in profiles {
            let id = p.node_id;
            if map.insert(id, p).is_some() {
                return Err(CreditError::DuplicateNode(id));
            }
        }
        Ok(CreditLedger {
            profiles: map,
            log: Vec::new(),
        })
    }

    pub fn profiles(&self) -> impl Iterator<Item = &NodeProfile> {
        self.profiles.values()
    }

    pub fn profile(&self, id: NodeId) -> Option<&NodeProfile> {
        self.profiles.get(&id)
    }

    pub fn credit(&self, id: NodeId) -> Option<i64> {
        self.profiles.get(&id).map(|p| p.credit)
    }

    pub fn node_by_key(&self, key: &PublicKey) -> Option<NodeId> {
        self.profiles
            .values()
            .find(|p| p.public_key == *key)
            .map(|p| p.node_id)
    }

    pub fn audit_log(&self) -> &[CreditEvent] {
        &self.log
    }

    /// Ids of every ranked (non-external) node.
    pub fn committee_ids(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.profiles
            .values()
            .filter(|p| p.role != Role::External)
            .map(|p| p.node_id)
    }

    fn record(&mut self, node_id: NodeId, reason: CreditReason, tick: u64) -> Result<CreditEvent, CreditError> {
        let profile = self
            .profiles
            .get_mut(&node_id)
            .ok_or(CreditError::UnknownNode(node_id))?;
        let event = CreditEvent {
            node_id,
            delta: reason.delta(),
            reason,
            tick,
        };
        profile.credit += event.delta;
        self.log.push(event);
        Ok(event)
    }

    /// +1 for a correct upload, −1 for an erroneous one.
    pub fn apply_record_outcome(&mut self, uploader: NodeId, correct: bool, tick: u64) -> Result<CreditEvent, CreditError> {
        let reason = if correct {
            CreditReason::RecordCorrect
        } else {
            CreditReason::RecordErroneous
        };
        self.record(uploader, reason, tick)
    }

    /// +1 for a clean sealed block, −1 for a block the validators flagged.
    pub fn apply_block_outcome(&mut self, recorder: NodeId, erroneous: bool, tick: u64) -> Result<CreditEvent, CreditError> {
        let reason = if erroneous {
            CreditReason::BlockErroneous
        } else {
            CreditReason::BlockClean
        };
        self.record(recorder, reason, tick)
    }

    /// Majority vote: validators with the majority gain a point, dissenters
    /// lose one.
    pub fn apply_validator_outcomes(
        &mut self,
        votes: &[(NodeId, Verdict)],
        tick: u64,
    ) -> Result<ValidationOutcome, CreditError> {
        if votes.is_empty() || votes.len().is_multiple_of(2) {
            return Err(CreditError::VoteCount(votes.len()));
        }
        if let Some((id, _)) = votes.iter().find(|(id, _)| !self.profiles.contains_key(id)) {
            return Err(CreditError::UnknownNode(*id));
        }
        let ok = votes.iter().filter(|(_, v)| *v == Verdict::Ok).count();
        let verdict = if ok * 2 > votes.len() {
            Verdict::Ok
        } else {
            Verdict::Erroneous
        };
        let events = votes
            .iter()
            .map(|&(id, v)| {
                let reason = if v == verdict {
                    CreditReason::ValidatorAgreed
                } else {
                    CreditReason::ValidatorDissented
                };
                self.record(id, reason, tick)
            })
            .collect::<Result<_, _>>()?;
        Ok(ValidationOutcome { verdict, events })
    }

    fn set_roles(&mut self, assignment: &RoleAssignment) {
        for id in assignment.members().collect::<Vec<_>>() {
            if let (Some(p), Some(role)) = (self.profiles.get_mut(&id), assignment.role_of(id)) {
                p.role = role;
            }
        }
    }

    /// First ranking, by assessment score. Resets every committee credit to
    /// `config.initial_credit`.
    pub fn initialize_roles(&mut self, config: &CommitteeConfig) -> Result<RoleAssignment, CreditError> {
        let ids: Vec<NodeId> = self.committee_ids().collect();
        if ids.is_empty() || config.max_recorders == 0 {
            return Err(CreditError::NoRecorders {
                nodes: ids.len(),
                max_recorders: config.max_recorders,
            });
        }
        let ranked = rank_by(ids, |id| self.profiles[&id].assessment as i128);
        for p in self.profiles.values_mut() {
            p.credit = config.initial_credit;
        }
        let assignment = RoleAssignment::from_ranking(&ranked, config, 0);
        self.set_roles(&assignment);
        Ok(assignment)
    }

    /// Periodic re-ranking by credit with unchanged capacities.
    pub fn reelect(&mut self, assignment: &RoleAssignment, config: &CommitteeConfig) -> RoleAssignment {
        let ranked = rank_by(assignment.members(), |id| {
            self.profiles.get(&id).map_or(i64::MIN, |p| p.credit) as i128
        });
        let next = RoleAssignment::from_ranking(&ranked, config, assignment.epoch + 1);
        self.set_roles(&next);
        next
    }

    /// Credits recomputed from the audit log alone.
    pub fn replay(&self, initial_credit: i64) -> BTreeMap<NodeId, i64> {
        let mut credits: BTreeMap<NodeId, i64> =
            self.profiles.keys().map(|&id| (id, initial_credit)).collect();
        for e in &self.log {
            *credits.entry(e.node_id).or_insert(initial_credit) += e.delta;
        }
        credits
    }

    pub fn credits(&self) -> BTreeMap<NodeId, i64> {
        self.profiles.iter().map(|(&id, p)| (id, p.credit)).collect()
    }

    /// Audit log as tab-separated lines with a header row.
    pub fn export_log(&self) -> String {
        let mut out = String::from("tick\tnode_id\tdelta\treason\n");
        for e in &self.log {
            out.push_str(&e.to_tsv());
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::generate_keypair;

    fn ledger(assessments: &[u64]) -> CreditLedger {
        CreditLedger::new(assessments.iter().enumerate().map(|(i, &a)| {
            let key = generate_keypair(&[i as u8 + 1; 32]).unwrap().public;
            NodeProfile::new(i as NodeId, key, a)
        }))
        .unwrap()
    }

    fn cfg(r: usize, s: usize) -> CommitteeConfig {
        CommitteeConfig {
            max_recorders: r,
            max_supervisors: s,
            ..CommitteeConfig::default()
        }
    }

    #[test]
    fn default_committee_sizes() {
        let mut l = ledger(&(0..150).map(|i| 1000 - i).collect::<Vec<_>>());
        let a = l.initialize_roles(&CommitteeConfig::default()).unwrap();
        assert_eq!((a.recorders.len(), a.supervisors.len(), a.candidates.len()), (101, 20, 29));
        assert_eq!(a.recorders[0], 0);
    }

    #[test]
    fn desk_scale_partition_and_tie_break() {
        let mut l = ledger(&[5, 9, 9, 1, 3]);
        let a = l.initialize_roles(&cfg(3, 1)).unwrap();
        assert_eq!(a.recorders, vec![1, 2, 0]);
        assert_eq!(a.supervisors, vec![4]);
        assert_eq!(a.candidates, vec![3]);
        assert_eq!(l.profile(4).unwrap().role, Role::Supervisor);
    }

    #[test]
    fn no_nodes_is_an_error() {
        let mut l = ledger(&[]);
        assert!(matches!(l.initialize_roles(&cfg(3, 1)), Err(CreditError::NoRecorders { .. })));
        let mut l = ledger(&[1]);
        assert!(l.initialize_roles(&cfg(0, 1)).is_err());
    }

    #[test]
    fn duplicate_ids_rejected() {
        let k = generate_keypair(&[1; 32]).unwrap().public;
        assert_eq!(
            CreditLedger::new([NodeProfile::new(1, k, 0), NodeProfile::new(1, k, 0)]).unwrap_err(),
            CreditError::DuplicateNode(1)
        );
    }

    #[test]
    fn record_and_block_sums() {
        let mut l = ledger(&[1, 1]);
        for _ in 0..3 {
            assert_eq!(l.apply_record_outcome(0, true, 1).unwrap().delta, 1);
        }
        for _ in 0..2 {
            assert_eq!(l.apply_record_outcome(0, false, 2).unwrap().delta, -1);
        }
        assert_eq!(l.credit(0), Some(1));
        for i in 0..5 {
            l.apply_block_outcome(1, i == 4, 3).unwrap();
        }
        assert_eq!(l.credit(1), Some(3));
        assert_eq!(l.apply_record_outcome(7, true, 0).unwrap_err(), CreditError::UnknownNode(7));
        assert_eq!(l.replay(0), l.credits());
    }

    #[test]
    fn validator_votes() {
        use Verdict::*;
        let mut l = ledger(&[0, 0, 0, 0]);
        let out = l.apply_validator_outcomes(&[(0, Ok), (1, Ok), (2, Erroneous)], 5).unwrap();
        assert_eq!(out.verdict, Ok);
        assert_eq!(out.events.iter().map(|e| e.delta).collect::<Vec<_>>(), vec![1, 1, -1]);
        assert_eq!(l.apply_validator_outcomes(&[], 5).unwrap_err(), CreditError::VoteCount(0));
        assert_eq!(
            l.apply_validator_outcomes(&[(0, Ok), (1, Ok)], 5).unwrap_err(),
            CreditError::VoteCount(2)
        );
        assert_eq!(
            l.apply_validator_outcomes(&[(0, Ok), (1, Ok), (9, Ok)], 5).unwrap_err(),
            CreditError::UnknownNode(9)
        );
    }

    #[test]
    fn duty_rotation() {
        let a = RoleAssignment {
            recorders: vec![10, 11, 12],
            ..Default::default()
        };
        let seq: Vec<_> = (0..6).map(|r| a.duty_recorder(r).unwrap()).collect();
        assert_eq!(seq, vec![10, 11, 12, 10, 11, 12]);
        let big = RoleAssignment {
            recorders: (0..101).collect(),
            ..Default::default()
        };
        assert_eq!(big.duty_recorder(101).unwrap(), 0);
        let one = RoleAssignment {
            recorders: vec![4],
            ..Default::default()
        };
        assert!((0..10).all(|r| one.duty_recorder(r).unwrap() == 4));
        assert_eq!(
            RoleAssignment::default().duty_recorder(0).unwrap_err(),
            CreditError::EmptyRecorderSet
        );
    }

    #[test]
    fn reelect_equal_credits_orders_by_id() {
        let mut l = ledger(&[1, 7, 3, 9, 2, 8]);
        let a = l.initialize_roles(&cfg(3, 1)).unwrap();
        let b = l.reelect(&a, &cfg(3, 1));
        assert_eq!(b.recorders, vec![0, 1, 2]);
        assert_eq!(b.supervisors, vec![3]);
        assert_eq!(b.candidates, vec![4, 5]);
        assert_eq!(b.epoch, 1);
        let c = l.reelect(&b, &cfg(3, 1));
        assert_eq!((c.recorders.clone(), c.supervisors.clone(), c.candidates.clone()),
                   (b.recorders, b.supervisors, b.candidates));
    }

    #[test]
    fn candidate_climbs_to_recorder() {
        let mut l = ledger(&[6, 5, 4, 3, 2, 1]);
        let a = l.initialize_roles(&cfg(3, 1)).unwrap();
        assert_eq!(a.candidates, vec![4, 5]);
        for _ in 0..3 {
            l.apply_record_outcome(5, true, 1).unwrap();
        }
        for id in [0, 1] {
            l.apply_block_outcome(id, false, 1).unwrap();
        }
        l.apply_block_outcome(2, true, 1).unwrap();
        let b = l.reelect(&a, &cfg(3, 1));
        // Independent oracle: stable sort on (-credit, id).
        let mut oracle: Vec<(i64, NodeId)> = l.profiles().map(|p| (-p.credit, p.node_id)).collect();
        oracle.sort();
        let oracle: Vec<NodeId> = oracle.into_iter().map(|(_, id)| id).collect();
        assert_eq!(b.members().collect::<Vec<_>>(), oracle);
        assert_eq!(b.recorders[0], 5);
        assert!(!b.recorders.contains(&2));
        assert_eq!(l.profile(2).unwrap().role, Role::Candidate);
    }

    #[test]
    fn external_nodes_are_never_ranked() {
        let k = |b| generate_keypair(&[b; 32]).unwrap().public;
        let mut l = CreditLedger::new([
            NodeProfile::new(0, k(1), 1),
            NodeProfile::external(1, k(2)),
        ])
        .unwrap();
        let a = l.initialize_roles(&cfg(3, 1)).unwrap();
        assert_eq!(a.len(), 1);
        assert_eq!(l.profile(1).unwrap().role, Role::External);
        l.apply_record_outcome(1, true, 0).unwrap();
        assert_eq!(l.reelect(&a, &cfg(3, 1)).len(), 1);
    }

    #[test]
    fn log_export_format() {
        let mut l = ledger(&[0]);
        l.apply_record_outcome(0, false, 12).unwrap();
        assert_eq!(l.export_log(), "tick\tnode_id\tdelta\treason\n12\t0\t-1\trecord-erroneous\n");
    }
}
