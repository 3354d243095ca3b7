use std::collections::{BTreeMap, BTreeSet};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::chain::{genesis, Chain, GenesisConfig, Record, RecordMetadata};
use crate::credit::{CommitteeConfig, CreditLedger, CreditReason, NodeId, NodeProfile, RoleAssignment, Verdict};
use crate::crypto::{self, generate_keypair, Digest, Keypair, PublicKey};
use crate::datastore::{DataStore, RepairReport};
use crate::record_protocol::{
    check_votes, commit, inverted, majority, prepare_upload, receive_upload, request_upload, seal_block,
    select_validators, validate_proposal, PermissionList, ProposedBlock, UploadDecision, Vote,
};
use crate::share_protocol::{initiate_share, receive_share, ShareTransaction};

use super::message::{Message, SimEvent};
use super::report::{
    CapturedMessage, FaultOutcome, FaultReport, Metrics, QuarantineEntry, RoleSnapshot, ShareAttempt, ShareDelivery,
    SimReport, SimStats,
};
use super::scenario::{Action, DigestRef, FaultKind, FaultSpec, Scenario};
use super::{SimConfig, SimError};

const NODE_KEY_LABEL: &[u8] = b"gridledger/sim/node-key";

struct OpenProposal {
    proposal: ProposedBlock,
    votes: Vec<Vote>,
}

struct Outgoing {
    payload: Vec<u8>,
    metadata: RecordMetadata,
}

struct Node {
    keys: Keypair,
    chain: Chain,
    external: bool,
    /// Down until this tick (exclusive); `u64::MAX` for good.
    down_until: Option<u64>,
    byzantine: bool,
    pending: Vec<Record>,
    open: Option<OpenProposal>,
    outbox: BTreeMap<u64, Outgoing>,
}

impl Node {
    fn is_up(&self, tick: u64) -> bool {
        self.down_until.is_none_or(|u| tick >= u)
    }
}

#[derive(Clone)]
struct Planned {
    tick: u64,
    action: Action,
    fault: Option<usize>,
}

#[derive(Default)]
struct Evidence {
    forged: Option<Digest>,
    tampered_block: Option<usize>,
    tampered_seq: Option<u64>,
    /// Rejection reason, or `None` if the tampered message was accepted.
    inflight_result: Option<Option<String>>,
    repair: Option<RepairReport>,
}

struct ArmedFault {
    spec: FaultSpec,
    activated: bool,
    evidence: Evidence,
}

/// A running simulation. Create with [`new_sim`].
pub struct Sim {
    config: SimConfig,
    committee: CommitteeConfig,
    now: u64,
    nodes: BTreeMap<NodeId, Node>,
    ledger: CreditLedger,
    assignment: RoleAssignment,
    roles: Vec<RoleSnapshot>,
    permissions: PermissionList,
    store: DataStore,
    rng: ChaCha20Rng,
    queue: BTreeMap<(u64, u64), SimEvent>,
    seq: u64,
    open_round: u64,
    actions: Vec<Planned>,
    next_action: usize,
    upload_count: usize,
    next_upload_id: u64,
    upload_digests: BTreeMap<usize, Digest>,
    payloads: BTreeMap<Digest, Vec<u8>>,
    fabricated: BTreeSet<Digest>,
    faults: Vec<ArmedFault>,
    quarantine: Vec<QuarantineEntry>,
    shares: Vec<ShareAttempt>,
    deliveries: Vec<ShareDelivery>,
    stats: SimStats,
    trace: Vec<String>,
    captured: Vec<CapturedMessage>,
    run_until: Option<u64>,
}

fn node_keypair(seed: u64, id: NodeId) -> Keypair {
    let material = crypto::digest_parts(&[NODE_KEY_LABEL, &seed.to_be_bytes(), &id.to_be_bytes()]);
    generate_keypair(material.as_bytes()).expect("32-byte seed")
}

fn flip(d: &Digest) -> Digest {
    let mut a = *d.as_bytes();
    a[0] ^= 0x01;
    Digest::from_array(a)
}

fn short(d: &Digest) -> String {
    d.to_hex()[..16].to_string()
}

fn ids(list: &[NodeId]) -> String {
    list.iter().map(u32::to_string).collect::<Vec<_>>().join(",")
}

/// Build the network described by `scenario`: seeded keys, initial roles,
/// genesis on every node and empty storage units.
pub fn new_sim(config: SimConfig, scenario: &Scenario) -> Result<Sim, SimError> {
    config.validate().map_err(SimError::Config)?;
    if scenario.nodes.is_empty() {
        return Err(SimError::Config("scenario declares no nodes".into()));
    }
    let mut profiles = Vec::new();
    let mut nodes = BTreeMap::new();
    let genesis_block = genesis(&GenesisConfig {
        network_id: config.network_id.clone(),
    });
    for decl in &scenario.nodes {
        let keys = node_keypair(config.seed, decl.id);
        profiles.push(match decl.assessment {
            Some(a) => NodeProfile::new(decl.id, keys.public, a),
            None => NodeProfile::external(decl.id, keys.public),
        });
        nodes.insert(
            decl.id,
            Node {
                keys,
                chain: Chain::new(genesis_block.clone()),
                external: decl.assessment.is_none(),
                down_until: None,
                byzantine: false,
                pending: Vec::new(),
                open: None,
                outbox: BTreeMap::new(),
            },
        );
    }
    let committee = config.committee();
    let mut ledger = CreditLedger::new(profiles)?;
    let assignment = ledger.initialize_roles(&committee)?;
    let permissions = PermissionList::new(scenario.authorized.iter().map(|(id, _)| nodes[id].keys.public));

    let mut sim = Sim {
        rng: ChaCha20Rng::seed_from_u64(config.seed),
        store: DataStore::with_units(config.storage_units),
        committee,
        now: 0,
        nodes,
        ledger,
        roles: vec![RoleSnapshot {
            tick: 0,
            assignment: assignment.clone(),
        }],
        assignment,
        permissions,
        queue: BTreeMap::new(),
        seq: 0,
        open_round: 1,
        actions: Vec::new(),
        next_action: 0,
        upload_count: 0,
        next_upload_id: 1,
        upload_digests: BTreeMap::new(),
        payloads: BTreeMap::new(),
        fabricated: BTreeSet::new(),
        faults: Vec::new(),
        quarantine: Vec::new(),
        shares: Vec::new(),
        deliveries: Vec::new(),
        stats: SimStats::default(),
        trace: Vec::new(),
        captured: Vec::new(),
        run_until: scenario.run_until,
        config,
    };
    let a = &sim.assignment;
    let detail = format!(
        "nodes={} recorders={} supervisors={} candidates={} genesis={}",
        sim.nodes.len(),
        ids(&a.recorders),
        ids(&a.supervisors),
        ids(&a.candidates),
        short(&genesis_block.digest())
    );
    sim.log("init", None, None, detail);

    let mut forge_by_line = BTreeMap::new();
    for (spec, line) in &scenario.faults {
        sim.check_target(spec)?;
        if spec.kind == FaultKind::ForgeRecord {
            forge_by_line.insert(*line, sim.faults.len());
        }
        sim.faults.push(ArmedFault {
            spec: spec.clone(),
            activated: false,
            evidence: Evidence::default(),
        });
    }
    for a in &scenario.actions {
        let forged = matches!(a.action, Action::Upload { forged: true, .. });
        sim.actions.push(Planned {
            tick: a.tick,
            action: a.action.clone(),
            fault: if forged { forge_by_line.get(&a.line).copied() } else { None },
        });
        if let Action::Upload { .. } = a.action {
            sim.upload_count += 1;
        }
    }
    Ok(sim)
}

/// Arm a fault. The target must exist and the activation tick must not be
/// in the past. A `forge-record` fault also schedules the forged upload.
pub fn inject_fault(sim: &mut Sim, spec: FaultSpec) -> Result<(), SimError> {
    sim.check_target(&spec)?;
    if spec.at < sim.now {
        return Err(SimError::PastActivation {
            at: spec.at,
            now: sim.now,
        });
    }
    if spec.kind == FaultKind::ForgeRecord {
        sim.upload_count += 1;
        let planned = Planned {
            tick: spec.at,
            action: Action::Upload {
                index: sim.upload_count,
                node: spec.target,
                data_class: spec.param("class").unwrap_or("load").to_string(),
                size: spec.param_u64("size").unwrap_or(128) as usize,
                forged: true,
            },
            fault: Some(sim.faults.len()),
        };
        let pos = sim.next_action
            + sim.actions[sim.next_action..]
                .iter()
                .take_while(|p| p.tick <= spec.at)
                .count();
        sim.actions.insert(pos, planned);
    }
    sim.log("fault-armed", None, Some(spec.target), spec.to_string());
    sim.faults.push(ArmedFault {
        spec,
        activated: false,
        evidence: Evidence::default(),
    });
    Ok(())
}

pub fn metrics(report: &SimReport) -> Metrics {
    report.metrics()
}

impl Sim {
    fn check_target(&self, spec: &FaultSpec) -> Result<(), SimError> {
        let (known, what) = if spec.kind.targets_unit() {
            (self.store.unit(spec.target).is_some(), "storage unit")
        } else {
            (self.nodes.contains_key(&spec.target), "node")
        };
        if known {
            Ok(())
        } else {
            Err(SimError::UnknownTarget {
                kind: spec.kind,
                what,
                target: spec.target,
            })
        }
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    /// The next tick [`Sim::step`] will process.
    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn node_ids(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.nodes.keys().copied()
    }

    pub fn keypair(&self, id: NodeId) -> Option<&Keypair> {
        self.nodes.get(&id).map(|n| &n.keys)
    }

    pub fn chain_of(&self, id: NodeId) -> Option<&Chain> {
        self.nodes.get(&id).map(|n| &n.chain)
    }

    pub fn ledger(&self) -> &CreditLedger {
        &self.ledger
    }

    pub fn assignment(&self) -> &RoleAssignment {
        &self.assignment
    }

    pub fn store(&self) -> &DataStore {
        &self.store
    }

    /// Digest of the payload generated for the n-th upload (1-based).
    pub fn upload_digest(&self, n: usize) -> Option<Digest> {
        self.upload_digests.get(&n).copied()
    }

    /// Plaintext of a payload the simulation generated.
    pub fn payload(&self, d: &Digest) -> Option<&[u8]> {
        self.payloads.get(d).map(Vec::as_slice)
    }

    pub fn payloads(&self) -> impl Iterator<Item = (&Digest, &Vec<u8>)> {
        self.payloads.iter()
    }

    /// Messages sent so far; empty unless `capture_wire` is set.
    pub fn captured(&self) -> &[CapturedMessage] {
        &self.captured
    }

    /// The scenario's `run until` tick.
    pub fn scenario_end(&self) -> Option<u64> {
        self.run_until
    }

    /// Digest of the externally observable state.
    pub fn state_digest(&self) -> Digest {
        let mut parts: Vec<Vec<u8>> = vec![self.now.to_be_bytes().to_vec()];
        for (id, n) in &self.nodes {
            parts.push(id.to_be_bytes().to_vec());
            parts.push(n.keys.public.as_bytes().to_vec());
            parts.push(n.chain.tip_digest().as_bytes().to_vec());
            parts.push((n.pending.len() as u64).to_be_bytes().to_vec());
        }
        parts.push(self.ledger.export_log().into_bytes());
        for id in self.assignment.members() {
            parts.push(id.to_be_bytes().to_vec());
            parts.push(vec![self.assignment.role_of(id).map_or(0, |r| r as u8)]);
        }
        let refs: Vec<&[u8]> = parts.iter().map(Vec::as_slice).collect();
        crypto::digest_parts(&refs)
    }

    fn log(&mut self, event: &str, src: Option<NodeId>, dst: Option<NodeId>, detail: String) {
        let id = |n: Option<NodeId>| n.map_or_else(|| "-".to_string(), |n| n.to_string());
        self.trace
            .push(format!("{}\t{}\t{}\t{}\t{}", self.now, event, id(src), id(dst), detail));
    }

    fn is_up(&self, id: NodeId) -> bool {
        self.nodes.get(&id).is_some_and(|n| n.is_up(self.now))
    }

    fn duty_recorder(&self) -> NodeId {
        self.assignment
            .duty_recorder(self.open_round)
            .expect("initialize_roles guarantees a recorder")
    }

    // ---- clock ----------------------------------------------------------

    /// Process one tick: faults, scenario actions, deliveries, then sealing
    /// and re-election on boundaries.
    pub fn step(&mut self) {
        let t = self.now;
        self.fault_tick(t);
        self.run_actions(t);
        self.deliver(t);
        if t > 0 && t.is_multiple_of(self.config.block_interval_ticks) {
            self.boundary(t);
        }
        self.now = t + 1;
    }

    /// Step through `until_tick` inclusive, let in-flight messages land, and
    /// report. No new blocks are sealed while settling.
    pub fn run(&mut self, until_tick: u64) -> SimReport {
        while self.now <= until_tick {
            self.step();
        }
        self.settle();
        self.report()
    }

    /// [`Sim::run`] to the scenario's `run until` tick (0 if absent).
    pub fn run_scenario(&mut self) -> SimReport {
        self.run(self.run_until.unwrap_or(0))
    }

    fn settle(&mut self) {
        while let Some((&(tick, _), _)) = self.queue.first_key_value() {
            self.now = tick;
            self.deliver(tick);
            self.now = tick + 1;
        }
    }

    // ---- faults ---------------------------------------------------------

    fn fault_tick(&mut self, t: u64) {
        for i in 0..self.faults.len() {
            let spec = self.faults[i].spec.clone();
            if !self.faults[i].activated && spec.at <= t {
                self.faults[i].activated = true;
                self.log("fault", None, Some(spec.target), spec.to_string());
                self.activate(&spec);
            }
            if !self.faults[i].activated {
                continue;
            }
            let end = spec.param_u64("for").map(|d| spec.at + d);
            match spec.kind {
                FaultKind::TamperChainCopy if self.faults[i].evidence.tampered_block.is_none() => {
                    self.try_tamper_chain(i)
                }
                FaultKind::CrashNode if end == Some(t) => self.recover_node(spec.target),
                FaultKind::FailStorageUnit if end == Some(t) => {
                    if let Ok(report) = self.store.recover_unit(spec.target) {
                        let detail = format!(
                            "unit={} restored={} unrecoverable={}",
                            spec.target,
                            report.restored.len(),
                            report.unrecoverable.len()
                        );
                        self.log("unit-recovered", None, None, detail);
                        self.faults[i].evidence.repair = Some(report);
                    }
                }
                _ => {}
            }
        }
    }

    fn activate(&mut self, spec: &FaultSpec) {
        match spec.kind {
            FaultKind::CrashNode => {
                let until = spec.param_u64("for").map_or(u64::MAX, |d| spec.at + d);
                let node = self.nodes.get_mut(&spec.target).expect("checked target");
                node.down_until = Some(until);
                node.pending.clear();
                node.open = None;
                node.outbox.clear();
            }
            FaultKind::ByzantineValidator => {
                self.nodes.get_mut(&spec.target).expect("checked target").byzantine = true;
            }
            FaultKind::FailStorageUnit => {
                let _ = self.store.fail_unit(spec.target);
            }
            FaultKind::ForgeRecord | FaultKind::TamperChainCopy | FaultKind::TamperInFlight => {}
        }
    }

    fn try_tamper_chain(&mut self, i: usize) {
        let spec = &self.faults[i].spec;
        let target = spec.target;
        let block_ix = spec.param_u64("block").unwrap_or(1) as usize;
        let record_ix = spec.param_u64("record").unwrap_or(0) as usize;
        let node = self.nodes.get_mut(&target).expect("checked target");
        if node.chain.len() <= block_ix {
            return;
        }
        let mut blocks = node.chain.clone().into_blocks();
        let block = &mut blocks[block_ix];
        let what = match block.records.get_mut(record_ix) {
            Some(r) => {
                r.payload_digest = flip(&r.payload_digest);
                format!("record {record_ix} digest")
            }
            None => {
                block.header.merkle_root = flip(&block.header.merkle_root);
                "merkle root".to_string()
            }
        };
        node.chain = Chain::from_blocks_unchecked(blocks);
        self.faults[i].evidence.tampered_block = Some(block_ix);
        self.log("tamper-chain", None, Some(target), format!("block={block_ix} field={what}"));
    }

    fn recover_node(&mut self, id: NodeId) {
        let chain = self.majority_chain(Some(id));
        let node = self.nodes.get_mut(&id).expect("checked target");
        node.down_until = None;
        node.chain = chain;
        let height = node.chain.len();
        self.log("recover", None, Some(id), format!("resynced height={height}"));
    }

    /// The chain copy held by the most nodes; ties go to the longer chain,
    /// then to the lowest holder id.
    fn majority_chain(&self, exclude: Option<NodeId>) -> Chain {
        let mut groups: BTreeMap<Digest, (usize, usize, NodeId)> = BTreeMap::new();
        for (&id, n) in &self.nodes {
            if Some(id) == exclude {
                continue;
            }
            let key = crypto::digest(n.chain.export().as_bytes());
            let e = groups.entry(key).or_insert((0, n.chain.len(), id));
            e.0 += 1;
        }
        let best = groups
            .values()
            .max_by(|a, b| a.0.cmp(&b.0).then(a.1.cmp(&b.1)).then(b.2.cmp(&a.2)))
            .map(|g| g.2);
        match best {
            Some(id) => self.nodes[&id].chain.clone(),
            None => self.nodes.values().next().expect("at least one node").chain.clone(),
        }
    }

    // ---- scenario actions -----------------------------------------------

    fn run_actions(&mut self, t: u64) {
        while self.next_action < self.actions.len() && self.actions[self.next_action].tick <= t {
            let planned = self.actions[self.next_action].clone();
            self.next_action += 1;
            match planned.action {
                Action::Upload {
                    index,
                    node,
                    data_class,
                    size,
                    forged,
                } => self.start_upload(index, node, &data_class, size, forged, planned.fault),
                Action::Share { from, to, digest } => self.start_share(from, to, &digest),
            }
        }
    }

    fn start_upload(
        &mut self,
        index: usize,
        node: NodeId,
        data_class: &str,
        size: usize,
        forged: bool,
        fault: Option<usize>,
    ) {
        if !self.is_up(node) {
            self.log("upload-skipped", Some(node), None, format!("upload={index} node down"));
            return;
        }
        let mut payload = vec![0u8; size];
        self.rng.fill_bytes(&mut payload);
        let d = crypto::digest(&payload);
        self.log(
            "rng",
            Some(node),
            None,
            format!("draw=payload upload={index} bytes={size} digest={}", short(&d)),
        );
        self.upload_digests.insert(index, d);
        self.payloads.insert(d, payload.clone());
        if forged {
            self.fabricated.insert(d);
            if let Some(f) = fault {
                self.faults[f].evidence.forged = Some(d);
            }
        }
        let metadata = RecordMetadata::grid_data(data_class, self.now).expect("class length checked by parser");
        self.begin_upload(node, payload, metadata);
    }

    fn begin_upload(&mut self, node: NodeId, payload: Vec<u8>, metadata: RecordMetadata) {
        let upload_id = self.next_upload_id;
        self.next_upload_id += 1;
        self.stats.uploads_started += 1;
        let n = self.nodes.get_mut(&node).expect("known node");
        n.outbox.insert(upload_id, Outgoing { payload, metadata });
        let uploader = n.keys.public;
        let duty = self.duty_recorder();
        self.send(node, duty, Message::UploadRequest { upload_id, uploader });
    }

    fn start_share(&mut self, from: NodeId, to: NodeId, digest_ref: &DigestRef) {
        let digest = match digest_ref {
            DigestRef::Literal(d) => Some(*d),
            DigestRef::Upload(n) => self.upload_digests.get(n).copied(),
        };
        let mut attempt = ShareAttempt {
            tick: self.now,
            from,
            to,
            digest,
            outcome: String::new(),
        };
        let Some(d) = digest else {
            attempt.outcome = "unresolved-digest".into();
            self.log("share-failed", Some(from), Some(to), attempt.outcome.clone());
            self.shares.push(attempt);
            return;
        };
        if !self.is_up(from) {
            attempt.outcome = "sender-down".into();
            self.log("share-failed", Some(from), Some(to), attempt.outcome.clone());
            self.shares.push(attempt);
            return;
        }
        let receiver = self.nodes[&to].keys.public;
        let sender = &self.nodes[&from];
        let result = initiate_share(&sender.keys, &receiver, &d, &sender.chain, &self.store, &mut self.rng);
        match result {
            Ok(env) => {
                attempt.outcome = "sent".into();
                self.log("share", Some(from), Some(to), format!("digest={}", short(&d)));
                self.shares.push(attempt);
                let tx = ShareTransaction {
                    sender: env.sender,
                    receiver,
                    payload_digest: d,
                    tick: self.now,
                };
                self.send(from, to, Message::ShareEnvelope(env));
                self.begin_upload(from, tx.canonical_bytes(), tx.metadata());
            }
            Err(e) => {
                attempt.outcome = e.name().into();
                self.log(
                    "share-failed",
                    Some(from),
                    Some(to),
                    format!("{} digest={}", attempt.outcome, short(&d)),
                );
                self.shares.push(attempt);
            }
        }
    }

    // ---- message bus ----------------------------------------------------

    fn send(&mut self, src: NodeId, dst: NodeId, mut message: Message) {
        let seq = self.seq;
        self.seq += 1;
        let armed = self.faults.iter().position(|f| {
            f.activated
                && f.spec.kind == FaultKind::TamperInFlight
                && f.spec.target == dst
                && f.evidence.tampered_seq.is_none()
        });
        if let Some(i) = armed {
            if message.tamper_ciphertext() {
                self.faults[i].evidence.tampered_seq = Some(seq);
                self.log("tamper-in-flight", Some(src), Some(dst), format!("kind={} seq={seq}", message.kind()));
            }
        }
        self.stats.messages_sent += 1;
        if self.config.capture_wire {
            self.captured.push(CapturedMessage {
                sent_tick: self.now,
                src,
                dst,
                kind: message.kind(),
                bytes: message.canonical_bytes(),
                envelopes: message.envelopes().into_iter().cloned().collect(),
            });
        }
        let deliver_tick = self.now + self.config.message_delay_ticks;
        self.queue.insert(
            (deliver_tick, seq),
            SimEvent {
                deliver_tick,
                seq,
                src,
                dst,
                message,
            },
        );
    }

    fn deliver(&mut self, t: u64) {
        while let Some(entry) = self.queue.first_entry() {
            if entry.key().0 != t {
                debug_assert!(entry.key().0 > t, "event scheduled in the past");
                break;
            }
            let ev = entry.remove();
            self.handle(ev);
        }
    }

    fn handle(&mut self, ev: SimEvent) {
        let bytes = ev.message.canonical_bytes();
        let detail = format!(
            "kind={} seq={} bytes={} digest={}",
            ev.message.kind(),
            ev.seq,
            bytes.len(),
            short(&crypto::digest(&bytes))
        );
        if !self.is_up(ev.dst) {
            self.stats.messages_dropped += 1;
            self.log("drop", Some(ev.src), Some(ev.dst), detail);
            return;
        }
        self.stats.messages_delivered += 1;
        self.log("deliver", Some(ev.src), Some(ev.dst), detail);
        let (src, dst, seq) = (ev.src, ev.dst, ev.seq);
        match ev.message {
            Message::UploadRequest { upload_id, uploader } => {
                let granted = request_upload(&uploader, &self.permissions) == UploadDecision::Granted;
                if !granted {
                    self.stats.uploads_denied += 1;
                }
                let recorder = self.nodes[&dst].keys.public;
                self.send(
                    dst,
                    src,
                    Message::UploadGrant {
                        upload_id,
                        granted,
                        recorder,
                    },
                );
            }
            Message::UploadGrant {
                upload_id,
                granted,
                recorder,
            } => self.on_grant(dst, src, upload_id, granted, recorder),
            Message::UploadEnvelope { envelope, .. } => self.on_upload(dst, seq, &envelope),
            Message::Proposal(p) => self.on_proposal(dst, src, &p),
            Message::Vote(v) => self.on_vote(dst, v),
            Message::CommitNotice { proposal, votes } => self.on_commit_notice(dst, proposal, &votes),
            Message::RecordHandoff(records) => {
                self.nodes.get_mut(&dst).expect("known node").pending.extend(records);
                self.forward_pending(dst);
            }
            Message::ShareEnvelope(env) => {
                let result = receive_share(&self.nodes[&dst].keys, &env);
                self.resolve_inflight(seq, result.as_ref().err().map(|e| e.name()));
                match result {
                    Ok(got) => {
                        let exact = self.payloads.get(&got.payload_digest) == Some(&got.payload);
                        let sender = self.ledger.node_by_key(&got.sender).unwrap_or(src);
                        self.log(
                            "share-received",
                            Some(sender),
                            Some(dst),
                            format!("digest={} exact={exact}", short(&got.payload_digest)),
                        );
                        self.deliveries.push(ShareDelivery {
                            tick: self.now,
                            sender,
                            receiver: dst,
                            digest: got.payload_digest,
                            exact,
                        });
                    }
                    Err(e) => {
                        *self.stats.share_rejections.entry(e.name().into()).or_default() += 1;
                        self.log("share-rejected", Some(src), Some(dst), e.name().into());
                    }
                }
            }
        }
    }

    fn resolve_inflight(&mut self, seq: u64, rejection: Option<&str>) {
        if let Some(f) = self
            .faults
            .iter_mut()
            .find(|f| f.spec.kind == FaultKind::TamperInFlight && f.evidence.tampered_seq == Some(seq))
        {
            f.evidence.inflight_result = Some(rejection.map(str::to_string));
        }
    }

    fn on_grant(&mut self, node: NodeId, recorder_id: NodeId, upload_id: u64, granted: bool, recorder: PublicKey) {
        let n = self.nodes.get_mut(&node).expect("known node");
        let Some(out) = n.outbox.remove(&upload_id) else {
            return;
        };
        if !granted {
            self.log("upload-denied", Some(node), Some(recorder_id), format!("upload_id={upload_id}"));
            return;
        }
        let envelope = prepare_upload(&n.keys, &recorder, &out.payload, out.metadata, &mut self.rng);
        self.send(node, recorder_id, Message::UploadEnvelope { upload_id, envelope });
    }

    fn on_upload(&mut self, recorder: NodeId, seq: u64, envelope: &crate::record_protocol::UploadEnvelope) {
        let result = receive_upload(&self.nodes[&recorder].keys, envelope, &self.permissions, &mut self.rng);
        self.resolve_inflight(seq, result.as_ref().err().map(|e| e.name()));
        match result {
            Ok(acc) => {
                self.stats.uploads_accepted += 1;
                let d = acc.record.payload_digest;
                match self.store.put(acc.stored, self.config.replication_factor) {
                    Ok(units) => self.log(
                        "store",
                        Some(recorder),
                        None,
                        format!("digest={} units={}", short(&d), ids(&units)),
                    ),
                    Err(e) => {
                        self.stats.store_failures += 1;
                        self.log("store-failed", Some(recorder), None, format!("digest={} {e}", short(&d)));
                    }
                }
                self.log(
                    "accept",
                    None,
                    Some(recorder),
                    format!("digest={} kind={}", short(&d), acc.record.metadata.kind.name()),
                );
                self.nodes.get_mut(&recorder).expect("known node").pending.push(acc.record);
                self.forward_pending(recorder);
            }
            Err(rej) => {
                *self.stats.upload_rejections.entry(rej.name().into()).or_default() += 1;
                let uploader = self.ledger.node_by_key(&envelope.uploader);
                self.log("upload-rejected", uploader, Some(recorder), rej.name().into());
                if let (true, Some(id)) = (rej.penalizes_uploader(), uploader) {
                    if let Ok(e) = self.ledger.apply_record_outcome(id, false, self.now) {
                        self.log_credit(&[e]);
                    }
                }
            }
        }
    }

    fn log_credit(&mut self, events: &[crate::credit::CreditEvent]) {
        for e in events {
            self.log("credit", None, Some(e.node_id), format!("{:+} {}", e.delta, e.reason));
        }
    }

    /// Off-duty nodes pass their pending records to the duty recorder.
    fn forward_pending(&mut self, id: NodeId) {
        let duty = self.duty_recorder();
        let up = self.is_up(id);
        let n = self.nodes.get_mut(&id).expect("known node");
        if id == duty || !up || n.external || n.open.is_some() || n.pending.is_empty() {
            return;
        }
        let records = std::mem::take(&mut n.pending);
        self.log("handoff", Some(id), Some(duty), format!("records={}", records.len()));
        self.send(id, duty, Message::RecordHandoff(records));
    }

    fn on_proposal(&mut self, validator: NodeId, proposer: NodeId, p: &ProposedBlock) {
        let n = &self.nodes[&validator];
        let fabricated = &self.fabricated;
        let result = validate_proposal(validator, &n.keys, p, &n.chain, |r| !fabricated.contains(&r.payload_digest));
        match result {
            Ok(mut vote) => {
                if n.byzantine {
                    let flipped = inverted(&vote.verdict, p.block.records.len());
                    vote = Vote::new(validator, &n.keys, vote.block_digest, flipped);
                }
                let verdict = match &vote.verdict {
                    crate::record_protocol::VoteVerdict::Ok => "ok".to_string(),
                    crate::record_protocol::VoteVerdict::Erroneous(ix) => format!(
                        "erroneous[{}]",
                        ix.iter().map(u32::to_string).collect::<Vec<_>>().join(",")
                    ),
                };
                self.log("vote", Some(validator), Some(proposer), format!("round={} verdict={verdict}", p.round));
                self.send(validator, proposer, Message::Vote(vote));
            }
            Err(e) => self.log("vote-refused", Some(validator), Some(proposer), e.to_string()),
        }
    }

    fn on_vote(&mut self, proposer: NodeId, vote: Vote) {
        let n = self.nodes.get_mut(&proposer).expect("known node");
        let Some(open) = n.open.as_mut() else {
            self.log("stale-vote", Some(vote.validator_id), Some(proposer), "no open proposal".into());
            return;
        };
        if open.proposal.block.digest() != vote.block_digest
            || open.votes.iter().any(|v| v.validator_id == vote.validator_id)
        {
            self.log("stale-vote", Some(vote.validator_id), Some(proposer), "not for the open proposal".into());
            return;
        }
        open.votes.push(vote);
        if open.votes.len() == crate::record_protocol::VALIDATORS_PER_BLOCK {
            let op = n.open.take().expect("just checked");
            self.finalize(proposer, op);
        }
    }

    fn finalize(&mut self, proposer: NodeId, op: OpenProposal) {
        let now = self.now;
        let n = self.nodes.get_mut(&proposer).expect("known node");
        let result = commit(&op.proposal, &op.votes, &mut n.chain, &mut self.ledger, now);
        let round = op.proposal.round;
        match result {
            Ok(res) => {
                if res.appended {
                    self.stats.blocks_committed += 1;
                } else {
                    self.stats.blocks_rejected += 1;
                    let n = self.nodes.get_mut(&proposer).expect("known node");
                    let mut pending = res.retained.clone();
                    pending.append(&mut n.pending);
                    n.pending = pending;
                    for r in &res.quarantined {
                        self.quarantine.push(QuarantineEntry {
                            tick: now,
                            round,
                            proposer,
                            record: r.clone(),
                        });
                    }
                }
                let event = if res.appended { "commit" } else { "reject" };
                let detail = format!(
                    "round={round} block={} records={} quarantined={} retained={}",
                    short(&op.proposal.block.digest()),
                    op.proposal.block.records.len(),
                    res.quarantined.len(),
                    res.retained.len()
                );
                self.log(event, Some(proposer), None, detail);
                self.log_credit(&res.events);
                if res.appended {
                    let others: Vec<NodeId> = self.nodes.keys().copied().filter(|&id| id != proposer).collect();
                    for id in others {
                        self.send(
                            proposer,
                            id,
                            Message::CommitNotice {
                                proposal: op.proposal.clone(),
                                votes: op.votes.clone(),
                            },
                        );
                    }
                }
            }
            Err(e) => {
                self.stats.commit_errors += 1;
                let n = self.nodes.get_mut(&proposer).expect("known node");
                let mut pending = op.proposal.block.records;
                pending.append(&mut n.pending);
                n.pending = pending;
                self.log("commit-failed", Some(proposer), None, format!("round={round} {e}"));
            }
        }
        self.forward_pending(proposer);
    }

    fn on_commit_notice(&mut self, node: NodeId, proposal: ProposedBlock, votes: &[Vote]) {
        let ledger = &self.ledger;
        let genuine = check_votes(&proposal, votes, |id| ledger.profile(id).map(|p| p.public_key)).is_ok()
            && majority(votes) == Verdict::Ok;
        if !genuine {
            self.log("notice-rejected", Some(proposal.proposer_id), Some(node), "votes do not support the block".into());
            return;
        }
        let n = self.nodes.get_mut(&node).expect("known node");
        if let Err(e) = n.chain.append(proposal.block) {
            self.stats.append_failures += 1;
            self.log("append-failed", Some(proposal.proposer_id), Some(node), e.to_string());
        }
    }

    // ---- boundaries -----------------------------------------------------

    fn boundary(&mut self, t: u64) {
        let round = t / self.config.block_interval_ticks;
        // Proposals that never gathered three votes lapse.
        let lapsed: Vec<NodeId> = self
            .nodes
            .iter()
            .filter(|(_, n)| n.open.is_some())
            .map(|(&id, _)| id)
            .collect();
        for id in lapsed {
            let n = self.nodes.get_mut(&id).expect("known node");
            let op = n.open.take().expect("filtered");
            let mut pending = op.proposal.block.records;
            pending.append(&mut n.pending);
            n.pending = pending;
            self.stats.proposals_lapsed += 1;
            self.log("lapse", Some(id), None, format!("round={} votes={}", op.proposal.round, op.votes.len()));
        }

        let duty = self.duty_recorder();
        if !self.is_up(duty) {
            self.stats.rounds_skipped += 1;
            self.log("seal-skipped", Some(duty), None, format!("round={round} recorder down"));
        } else {
            match select_validators(&self.assignment, round, duty, &mut self.rng) {
                Ok(validators) => {
                    self.log(
                        "rng",
                        Some(duty),
                        None,
                        format!("draw=validator-select round={round} picked={}", ids(&validators)),
                    );
                    let interval = self.config.block_interval_ticks;
                    let n = self.nodes.get_mut(&duty).expect("known node");
                    let pending = std::mem::take(&mut n.pending);
                    let proposal = seal_block(&n.keys, duty, pending, &n.chain, t, interval, round, validators)
                        .expect("boundary tick");
                    n.open = Some(OpenProposal {
                        proposal: proposal.clone(),
                        votes: Vec::new(),
                    });
                    self.stats.blocks_proposed += 1;
                    self.log(
                        "seal",
                        Some(duty),
                        None,
                        format!(
                            "round={round} block={} records={}",
                            short(&proposal.block.digest()),
                            proposal.block.records.len()
                        ),
                    );
                    for v in validators {
                        self.send(duty, v, Message::Proposal(proposal.clone()));
                    }
                }
                Err(e) => {
                    self.stats.rounds_skipped += 1;
                    self.log("seal-skipped", Some(duty), None, format!("round={round} {e}"));
                }
            }
        }
        self.open_round = round + 1;

        if round.is_multiple_of(self.config.epoch_length_blocks) {
            let next = self.ledger.reelect(&self.assignment, &self.committee);
            let detail = format!(
                "epoch={} recorders={} supervisors={} candidates={}",
                next.epoch,
                ids(&next.recorders),
                ids(&next.supervisors),
                ids(&next.candidates)
            );
            self.log("reelect", None, None, detail);
            self.assignment = next.clone();
            self.roles.push(RoleSnapshot {
                tick: t,
                assignment: next,
            });
        }
        let all: Vec<NodeId> = self.nodes.keys().copied().collect();
        for id in all {
            self.forward_pending(id);
        }
    }

    // ---- report ---------------------------------------------------------

    pub fn report(&self) -> SimReport {
        let chain = self.majority_chain(None);
        let node_verification = self.nodes.iter().map(|(&id, n)| (id, n.chain.verify())).collect();
        let node_agrees = self.nodes.iter().map(|(&id, n)| (id, n.chain == chain)).collect();
        let pending_at_end = self
            .nodes
            .values()
            .map(|n| n.pending.len() + n.open.as_ref().map_or(0, |o| o.proposal.block.records.len()))
            .sum();
        let mut report = SimReport {
            config: self.config.clone(),
            final_tick: self.now.saturating_sub(1),
            chain,
            node_verification,
            node_agrees,
            ledger: self.ledger.clone(),
            roles: self.roles.clone(),
            quarantine: self.quarantine.clone(),
            audit: self.store.audit(),
            faults: Vec::new(),
            shares: self.shares.clone(),
            deliveries: self.deliveries.clone(),
            pending_at_end,
            stats: self.stats.clone(),
            trace: self.trace.clone(),
        };
        report.faults = self.faults.iter().map(|f| self.evaluate(f, &report)).collect();
        report
    }

    fn evaluate(&self, f: &ArmedFault, report: &SimReport) -> FaultReport {
        let spec = &f.spec;
        let ev = &f.evidence;
        let outcome = |o: FaultOutcome, detail: String| FaultReport {
            spec: spec.clone(),
            outcome: o,
            detail,
        };
        if !f.activated {
            return outcome(FaultOutcome::NotTriggered, "activation tick not reached".into());
        }
        match spec.kind {
            FaultKind::ForgeRecord => {
                let Some(d) = ev.forged else {
                    return outcome(FaultOutcome::NotTriggered, "forger was down".into());
                };
                let credit = self.ledger.credit(spec.target).unwrap_or(0);
                if report.chain.records().any(|(_, _, r)| r.payload_digest == d) {
                    outcome(FaultOutcome::Missed, format!("forged {} committed", short(&d)))
                } else if report.quarantine.iter().any(|q| q.record.payload_digest == d) {
                    outcome(
                        FaultOutcome::Detected,
                        format!("forged {} quarantined; forger credit {credit}", short(&d)),
                    )
                } else {
                    outcome(FaultOutcome::NotTriggered, format!("forged {} never reached a block", short(&d)))
                }
            }
            FaultKind::TamperChainCopy => {
                let Some(b) = ev.tampered_block else {
                    return outcome(FaultOutcome::NotTriggered, "target chain never reached the block".into());
                };
                let others_ok = report
                    .node_verification
                    .iter()
                    .filter(|(&id, _)| id != spec.target)
                    .all(|(_, r)| r.is_ok());
                match report.node_verification.get(&spec.target) {
                    Some(Err(v)) if v.index <= b + 1 => outcome(
                        FaultOutcome::Detected,
                        format!("node {} copy fails at {v}; other copies verify: {others_ok}", spec.target),
                    ),
                    Some(Err(v)) => outcome(FaultOutcome::Missed, format!("violation reported late: {v}")),
                    _ => outcome(FaultOutcome::Missed, "tampered copy still verifies".into()),
                }
            }
            FaultKind::TamperInFlight => match (&ev.tampered_seq, &ev.inflight_result) {
                (None, _) => outcome(FaultOutcome::NotTriggered, "no envelope sent to target".into()),
                (Some(_), None) => outcome(FaultOutcome::NotTriggered, "tampered message never delivered".into()),
                (Some(_), Some(Some(reason))) => outcome(FaultOutcome::Detected, format!("rejected: {reason}")),
                (Some(_), Some(None)) => outcome(FaultOutcome::Missed, "tampered message accepted".into()),
            },
            FaultKind::CrashNode => {
                let interval = self.config.block_interval_ticks;
                let next_boundary = (spec.at / interval + 1) * interval;
                if next_boundary > report.final_tick {
                    return outcome(FaultOutcome::NotTriggered, "no block boundary after the crash".into());
                }
                let after = report
                    .chain
                    .blocks()
                    .iter()
                    .filter(|b| b.header.timestamp_tick > spec.at)
                    .count();
                if after > 0 {
                    outcome(FaultOutcome::Tolerated, format!("{after} blocks committed after the crash"))
                } else {
                    outcome(FaultOutcome::Missed, "chain stalled after the crash".into())
                }
            }
            FaultKind::ByzantineValidator => {
                let (mut agreed, mut dissented) = (0, 0);
                for e in self.ledger.audit_log() {
                    if e.node_id == spec.target && e.tick >= spec.at {
                        match e.reason {
                            CreditReason::ValidatorAgreed => agreed += 1,
                            CreditReason::ValidatorDissented => dissented += 1,
                            _ => {}
                        }
                    }
                }
                let credit = self.ledger.credit(spec.target).unwrap_or(0);
                let detail = format!("dissented {dissented}, agreed {agreed}; credit {credit}");
                if dissented > 0 {
                    outcome(FaultOutcome::Detected, detail)
                } else if agreed == 0 {
                    outcome(FaultOutcome::NotTriggered, "never served as validator".into())
                } else {
                    outcome(FaultOutcome::Missed, detail)
                }
            }
            FaultKind::FailStorageUnit => {
                let total = self.store.object_digests().count();
                let unreadable = self
                    .store
                    .object_digests()
                    .filter(|d| self.store.get(d).is_none())
                    .count();
                let restored = ev.repair.as_ref().map_or(0, |r| r.restored.len());
                let detail = format!("{} of {total} objects readable; {restored} restored", total - unreadable);
                if unreadable == 0 {
                    outcome(FaultOutcome::Tolerated, detail)
                } else {
                    outcome(FaultOutcome::Missed, detail)
                }
            }
        }
    }
}
