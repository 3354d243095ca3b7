//! Seven-step recording procedure.
//!
//! 1-2. The uploader asks the duty recorder for permission ([`request_upload`]).
//! 3. It signs the payload digest and seals the payload to the recorder
//!    ([`prepare_upload`]).
//! 4. The recorder opens the envelope, checks the digest and signature, queues
//!    the record and re-seals the payload to its owner for storage
//!    ([`receive_upload`]).
//! 5. At each interval boundary the recorder seals a block and picks its
//!    validators: the duty supervisor plus two randomly drawn candidates
//!    ([`select_validators`], [`seal_block`]).
//! 6. Each validator re-checks the block and returns a signed vote
//!    ([`validate_proposal`]).
//! 7. The majority decides; the block is appended or its flagged records are
//!    quarantined, and credits move accordingly ([`commit`]).

use std::collections::{BTreeMap, BTreeSet};

use rand::{CryptoRng, Rng, RngCore};
use thiserror::Error;

use crate::chain::{Block, Chain, ChainError, Record, RecordKind, RecordMetadata, ShareTransaction};
use crate::codec::{CodecError, Reader, Writer};
use crate::credit::{CreditError, CreditEvent, CreditLedger, NodeId, RoleAssignment, Verdict};
use crate::crypto::{
    self, encrypt_for_with_rng, Digest, Envelope, Keypair, PublicKey, Signature,
};
use crate::datastore::StoredObject;

/// Ten simulated minutes at one tick per second.
pub const DEFAULT_BLOCK_INTERVAL_TICKS: u64 = 600;
pub const VALIDATORS_PER_BLOCK: usize = 3;
const VOTE_LABEL: &[u8] = b"gridledger/vote/v1";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ProtocolError {
    #[error(transparent)]
    Chain(#[from] ChainError),
    #[error(transparent)]
    Credit(#[from] CreditError),
    #[error("tick {tick} is not a positive multiple of the {interval}-tick block interval")]
    OffBoundary { tick: u64, interval: u64 },
    #[error("need {VALIDATORS_PER_BLOCK} validators besides the proposer, only {available} available")]
    InsufficientValidators { available: usize },
    #[error("node {0} is not a validator for this proposal")]
    NotAssigned(NodeId),
    #[error("expected {VALIDATORS_PER_BLOCK} votes, got {0}")]
    WrongVoteCount(usize),
    #[error("vote from node {0} does not verify")]
    UnverifiableVote(NodeId),
    #[error("decode: {0}")]
    Codec(#[from] CodecError),
}

/// Keys allowed to upload. Grows only.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PermissionList {
    keys: BTreeSet<PublicKey>,
}

impl PermissionList {
    pub fn new(keys: impl IntoIterator<Item = PublicKey>) -> Self {
        PermissionList {
            keys: keys.into_iter().collect(),
        }
    }

    pub fn authorize(&mut self, key: PublicKey) {
        self.keys.insert(key);
    }

    pub fn contains(&self, key: &PublicKey) -> bool {
        self.keys.contains(key)
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UploadDecision {
    Granted,
    Denied,
}

pub fn request_upload(uploader: &PublicKey, permissions: &PermissionList) -> UploadDecision {
    if permissions.contains(uploader) {
        UploadDecision::Granted
    } else {
        UploadDecision::Denied
    }
}

/// What the uploader sends to the duty recorder. `payload_digest` is the
/// digest the uploader claims and signed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UploadEnvelope {
    pub uploader: PublicKey,
    pub payload_digest: Digest,
    pub signed_digest: Signature,
    pub payload_envelope: Envelope,
    pub metadata: RecordMetadata,
}

impl UploadEnvelope {
    pub fn canonical_bytes(&self) -> Vec<u8> {
        // The metadata travels as a record-shaped blob so the chain codec is reused.
        let meta = Record {
            uploader: self.uploader,
            payload_digest: self.payload_digest,
            metadata: self.metadata.clone(),
            uploader_signature: self.signed_digest,
        };
        Writer::new()
            .bytes(&meta.canonical_bytes())
            .bytes(&self.payload_envelope.to_bytes())
            .finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ProtocolError> {
        let mut r = Reader::new(bytes);
        let meta = Record::from_bytes(r.bytes("upload record")?)?;
        let payload_envelope = Envelope::from_bytes(r.bytes("payload envelope")?)
            .map_err(|_| CodecError::Invalid("payload envelope"))?;
        r.finish()?;
        Ok(UploadEnvelope {
            uploader: meta.uploader,
            payload_digest: meta.payload_digest,
            signed_digest: meta.uploader_signature,
            payload_envelope,
            metadata: meta.metadata,
        })
    }
}

/// Sign the payload digest and seal the payload to the duty recorder.
pub fn prepare_upload<R: RngCore + CryptoRng>(
    uploader: &Keypair,
    recorder: &PublicKey,
    payload: &[u8],
    metadata: RecordMetadata,
    rng: &mut R,
) -> UploadEnvelope {
    let payload_digest = crypto::digest(payload);
    UploadEnvelope {
        uploader: uploader.public,
        payload_digest,
        signed_digest: uploader.sign(payload_digest.as_bytes()),
        payload_envelope: encrypt_for_with_rng(recorder, payload, rng),
        metadata,
    }
}

/// [`prepare_upload`] for a grid-data payload; fails if `data_class` is
/// empty or longer than 64 bytes.
pub fn prepare_grid_upload<R: RngCore + CryptoRng>(
    uploader: &Keypair,
    recorder: &PublicKey,
    payload: &[u8],
    data_class: &str,
    created_tick: u64,
    rng: &mut R,
) -> Result<UploadEnvelope, ProtocolError> {
    let metadata = RecordMetadata::grid_data(data_class, created_tick)?;
    Ok(prepare_upload(uploader, recorder, payload, metadata, rng))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum UploadRejection {
    #[error("uploader lacks upload permission")]
    PermissionDenied,
    #[error("uploader signature does not verify")]
    SignatureInvalid,
    #[error("payload digest does not match the signed digest")]
    DigestMismatch,
    #[error("payload could not be decrypted")]
    DecryptionFailure,
}

impl UploadRejection {
    /// Every rejection except a permission failure counts against the uploader.
    pub fn penalizes_uploader(self) -> bool {
        !matches!(self, UploadRejection::PermissionDenied)
    }

    pub fn name(self) -> &'static str {
        match self {
            UploadRejection::PermissionDenied => "permission-denied",
            UploadRejection::SignatureInvalid => "signature-invalid",
            UploadRejection::DigestMismatch => "digest-mismatch",
            UploadRejection::DecryptionFailure => "decryption-failure",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AcceptedUpload {
    pub record: Record,
    /// Payload re-sealed to the uploader, ready for the data store.
    pub stored: StoredObject,
}

pub fn receive_upload<R: RngCore + CryptoRng>(
    recorder: &Keypair,
    envelope: &UploadEnvelope,
    permissions: &PermissionList,
    rng: &mut R,
) -> Result<AcceptedUpload, UploadRejection> {
    if !permissions.contains(&envelope.uploader) {
        return Err(UploadRejection::PermissionDenied);
    }
    if !crypto::verify(
        &envelope.uploader,
        envelope.payload_digest.as_bytes(),
        &envelope.signed_digest,
    ) {
        return Err(UploadRejection::SignatureInvalid);
    }
    let plaintext = recorder
        .decrypt(&envelope.payload_envelope)
        .map_err(|_| UploadRejection::DecryptionFailure)?;
    if crypto::digest(&plaintext) != envelope.payload_digest {
        return Err(UploadRejection::DigestMismatch);
    }
    let record = Record {
        uploader: envelope.uploader,
        payload_digest: envelope.payload_digest,
        metadata: envelope.metadata.clone(),
        uploader_signature: envelope.signed_digest,
    };
    let stored = StoredObject {
        payload_digest: envelope.payload_digest,
        ciphertext: encrypt_for_with_rng(&envelope.uploader, &plaintext, rng),
        owner: envelope.uploader,
    };
    Ok(AcceptedUpload { record, stored })
}

/// Duty supervisor for `round` plus two candidates drawn with `rng`.
///
/// When a tier is short the remaining seats go, in ranking order, to other
/// supervisors and then to recorders other than the proposer.
pub fn select_validators<R: Rng>(
    assignment: &RoleAssignment,
    round: u64,
    proposer: NodeId,
    rng: &mut R,
) -> Result<[NodeId; VALIDATORS_PER_BLOCK], ProtocolError> {
    let mut picked: Vec<NodeId> = Vec::with_capacity(VALIDATORS_PER_BLOCK);
    if let Some(s) = assignment.duty_supervisor(round) {
        if s != proposer {
            picked.push(s);
        }
    }
    let mut pool: Vec<NodeId> = assignment
        .candidates
        .iter()
        .copied()
        .filter(|&c| c != proposer)
        .collect();
    // Partial Fisher-Yates over the candidates.
    let want = (VALIDATORS_PER_BLOCK - picked.len()).min(pool.len());
    for i in 0..want {
        let j = rng.gen_range(i..pool.len());
        pool.swap(i, j);
        picked.push(pool[i]);
    }
    let fallback = assignment
        .supervisors
        .iter()
        .chain(&assignment.recorders)
        .copied()
        .filter(|&id| id != proposer);
    for id in fallback {
        if picked.len() == VALIDATORS_PER_BLOCK {
            break;
        }
        if !picked.contains(&id) {
            picked.push(id);
        }
    }
    picked
        .try_into()
        .map_err(|v: Vec<NodeId>| ProtocolError::InsufficientValidators { available: v.len() })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProposedBlock {
    pub block: Block,
    pub proposer_id: NodeId,
    pub round: u64,
    pub validator_ids: [NodeId; VALIDATORS_PER_BLOCK],
}

impl ProposedBlock {
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(&self.block.canonical_bytes())
            .u32(self.proposer_id)
            .u64(self.round);
        for id in self.validator_ids {
            w.u32(id);
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ProtocolError> {
        let mut r = Reader::new(bytes);
        let block = Block::from_bytes(r.bytes("block")?)?;
        let proposer_id = r.u32("proposer")?;
        let round = r.u64("round")?;
        let mut validator_ids = [0; VALIDATORS_PER_BLOCK];
        for v in &mut validator_ids {
            *v = r.u32("validator")?;
        }
        r.finish()?;
        Ok(ProposedBlock {
            block,
            proposer_id,
            round,
            validator_ids,
        })
    }
}

/// Build and sign the block for an interval boundary. Records keep their
/// arrival order.
#[allow(clippy::too_many_arguments)]
pub fn seal_block(
    recorder: &Keypair,
    proposer_id: NodeId,
    pending: Vec<Record>,
    chain: &Chain,
    tick: u64,
    interval: u64,
    round: u64,
    validator_ids: [NodeId; VALIDATORS_PER_BLOCK],
) -> Result<ProposedBlock, ProtocolError> {
    if tick == 0 || interval == 0 || !tick.is_multiple_of(interval) {
        return Err(ProtocolError::OffBoundary { tick, interval });
    }
    Ok(ProposedBlock {
        block: Block::seal(recorder, chain.tip_digest(), tick, pending),
        proposer_id,
        round,
        validator_ids,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum VoteVerdict {
    Ok,
    /// Offending record indices; empty when the header itself is bad.
    Erroneous(Vec<u32>),
}

impl VoteVerdict {
    pub fn kind(&self) -> Verdict {
        match self {
            VoteVerdict::Ok => Verdict::Ok,
            VoteVerdict::Erroneous(_) => Verdict::Erroneous,
        }
    }

    fn encode(&self, w: &mut Writer) {
        match self {
            VoteVerdict::Ok => {
                w.u8(0);
            }
            VoteVerdict::Erroneous(ix) => {
                w.u8(1).u32(ix.len() as u32);
                for i in ix {
                    w.u32(*i);
                }
            }
        }
    }

    fn decode(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        match r.u8("verdict")? {
            0 => Ok(VoteVerdict::Ok),
            1 => {
                let n = r.u32("offender count")? as usize;
                let mut ix = Vec::with_capacity(n.min(4096));
                for _ in 0..n {
                    ix.push(r.u32("offender")?);
                }
                Ok(VoteVerdict::Erroneous(ix))
            }
            tag => Err(CodecError::BadTag {
                field: "verdict",
                tag,
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vote {
    pub validator_id: NodeId,
    pub block_digest: Digest,
    pub verdict: VoteVerdict,
    pub signature: Signature,
}

impl Vote {
    fn signing_bytes(validator_id: NodeId, block_digest: &Digest, verdict: &VoteVerdict) -> Vec<u8> {
        let mut w = Writer::new();
        w.fixed(VOTE_LABEL).fixed(block_digest.as_bytes()).u32(validator_id);
        verdict.encode(&mut w);
        w.finish()
    }

    pub fn new(validator_id: NodeId, keys: &Keypair, block_digest: Digest, verdict: VoteVerdict) -> Self {
        let signature = keys.sign(&Self::signing_bytes(validator_id, &block_digest, &verdict));
        Vote {
            validator_id,
            block_digest,
            verdict,
            signature,
        }
    }

    pub fn verify(&self, key: &PublicKey) -> bool {
        crypto::verify(
            key,
            &Self::signing_bytes(self.validator_id, &self.block_digest, &self.verdict),
            &self.signature,
        )
    }

    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.u32(self.validator_id).fixed(self.block_digest.as_bytes());
        self.verdict.encode(&mut w);
        w.fixed(self.signature.as_bytes());
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ProtocolError> {
        let mut r = Reader::new(bytes);
        let validator_id = r.u32("validator")?;
        let block_digest = Digest::from_array(r.array("block digest")?);
        let verdict = VoteVerdict::decode(&mut r)?;
        let signature = Signature::from_slice(&r.array::<64>("signature")?).expect("64 bytes");
        r.finish()?;
        Ok(Vote {
            validator_id,
            block_digest,
            verdict,
            signature,
        })
    }
}

/// A share record must reference an on-chain grid-data record owned by its
/// sender, and carry the digest of the transaction it describes.
pub fn share_record_consistent(record: &Record, chain: &Chain) -> bool {
    match &record.metadata.kind {
        RecordKind::GridData => true,
        RecordKind::ShareTransaction { shared_digest, .. } => {
            let owned = chain
                .origin_of(shared_digest)
                .is_some_and(|origin| origin.uploader == record.uploader);
            let tx = ShareTransaction::from_record(record).expect("share kind");
            owned && crypto::digest(&tx.canonical_bytes()) == record.payload_digest
        }
    }
}

/// Re-check a proposal against the validator's own chain copy.
///
/// `is_valid` is the scenario's stand-in for detecting fabricated data.
pub fn validate_proposal<F>(
    validator_id: NodeId,
    keys: &Keypair,
    proposal: &ProposedBlock,
    chain: &Chain,
    is_valid: F,
) -> Result<Vote, ProtocolError>
where
    F: Fn(&Record) -> bool,
{
    if !proposal.validator_ids.contains(&validator_id) {
        return Err(ProtocolError::NotAssigned(validator_id));
    }
    let block = &proposal.block;
    let header_ok = block.header.prev_block_digest == chain.tip_digest()
        && block.header.timestamp_tick >= chain.tip_tick()
        && block.header.merkle_root == crate::chain::records_root(&block.records)
        && block.header.signature_valid();
    let verdict = if !header_ok {
        VoteVerdict::Erroneous(Vec::new())
    } else {
        let offenders: Vec<u32> = block
            .records
            .iter()
            .enumerate()
            .filter(|(_, r)| !(r.signature_valid() && share_record_consistent(r, chain) && is_valid(r)))
            .map(|(i, _)| i as u32)
            .collect();
        if offenders.is_empty() {
            VoteVerdict::Ok
        } else {
            VoteVerdict::Erroneous(offenders)
        }
    };
    Ok(Vote::new(validator_id, keys, block.digest(), verdict))
}

/// The opposite verdict, as cast by a validator that lies.
pub fn inverted(verdict: &VoteVerdict, record_count: usize) -> VoteVerdict {
    match verdict {
        VoteVerdict::Ok => VoteVerdict::Erroneous((0..record_count as u32).collect()),
        VoteVerdict::Erroneous(_) => VoteVerdict::Ok,
    }
}

/// Check that `votes` are exactly the proposal's validators, over this block,
/// each signed by the voter.
pub fn check_votes<K>(proposal: &ProposedBlock, votes: &[Vote], key_of: K) -> Result<(), ProtocolError>
where
    K: Fn(NodeId) -> Option<PublicKey>,
{
    if votes.len() != VALIDATORS_PER_BLOCK {
        return Err(ProtocolError::WrongVoteCount(votes.len()));
    }
    let digest = proposal.block.digest();
    let mut seen = BTreeSet::new();
    for v in votes {
        let ok = proposal.validator_ids.contains(&v.validator_id)
            && seen.insert(v.validator_id)
            && v.block_digest == digest
            && key_of(v.validator_id).is_some_and(|k| v.verify(&k));
        if !ok {
            return Err(ProtocolError::UnverifiableVote(v.validator_id));
        }
    }
    Ok(())
}

/// Majority verdict of an already checked vote set.
pub fn majority(votes: &[Vote]) -> Verdict {
    let ok = votes.iter().filter(|v| v.verdict.kind() == Verdict::Ok).count();
    if ok * 2 > votes.len() {
        Verdict::Ok
    } else {
        Verdict::Erroneous
    }
}

/// Records flagged by a strict majority of all votes.
pub fn majority_flagged(votes: &[Vote]) -> BTreeSet<u32> {
    let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
    for v in votes {
        if let VoteVerdict::Erroneous(ix) = &v.verdict {
            for i in ix.iter().collect::<BTreeSet<_>>() {
                *counts.entry(*i).or_default() += 1;
            }
        }
    }
    counts
        .into_iter()
        .filter(|&(_, n)| n * 2 > votes.len())
        .map(|(i, _)| i)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommitResult {
    pub verdict: Verdict,
    pub appended: bool,
    /// Records flagged by the majority; never appended.
    pub quarantined: Vec<Record>,
    /// Unflagged records of a rejected block, to be proposed again.
    pub retained: Vec<Record>,
    pub events: Vec<CreditEvent>,
}

/// Apply the validators' decision to `chain` and `ledger`.
pub fn commit(
    proposal: &ProposedBlock,
    votes: &[Vote],
    chain: &mut Chain,
    ledger: &mut CreditLedger,
    tick: u64,
) -> Result<CommitResult, ProtocolError> {
    check_votes(proposal, votes, |id| ledger.profile(id).map(|p| p.public_key))?;
    let uploader_ids = proposal
        .block
        .records
        .iter()
        .map(|r| ledger.node_by_key(&r.uploader).ok_or(CreditError::UnknownNode(u32::MAX)))
        .collect::<Result<Vec<_>, _>>()?;
    let verdict = majority(votes);
    if verdict == Verdict::Ok {
        // Check before any credit moves so a stale proposal changes nothing.
        chain.append(proposal.block.clone())?;
    }
    let tally: Vec<(NodeId, Verdict)> = votes.iter().map(|v| (v.validator_id, v.verdict.kind())).collect();
    let mut events = ledger.apply_validator_outcomes(&tally, tick)?.events;
    let records = &proposal.block.records;
    let mut result = CommitResult {
        verdict,
        appended: verdict == Verdict::Ok,
        quarantined: Vec::new(),
        retained: Vec::new(),
        events: Vec::new(),
    };
    match verdict {
        Verdict::Ok => {
            events.push(ledger.apply_block_outcome(proposal.proposer_id, false, tick)?);
            for id in &uploader_ids {
                events.push(ledger.apply_record_outcome(*id, true, tick)?);
            }
        }
        Verdict::Erroneous => {
            events.push(ledger.apply_block_outcome(proposal.proposer_id, true, tick)?);
            let flagged = majority_flagged(votes);
            for (i, rec) in records.iter().enumerate() {
                if flagged.contains(&(i as u32)) {
                    events.push(ledger.apply_record_outcome(uploader_ids[i], false, tick)?);
                    result.quarantined.push(rec.clone());
                } else {
                    result.retained.push(rec.clone());
                }
            }
        }
    }
    result.events = events;
    Ok(result)
}
