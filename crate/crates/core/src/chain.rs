//! Records, blocks and the hash-linked chain.
//!
//! A block's digest is the digest of its canonical header bytes (signature
//! included). Records are covered through the header's Merkle root, whose
//! leaves are [`merkle::leaf_digest`] of each record's canonical bytes.

use std::fmt;

use thiserror::Error;

use crate::codec::{CodecError, Reader, Writer};
use crate::crypto::{self, Digest, Keypair, PublicKey, Signature, PUBLIC_KEY_LEN};
use crate::merkle;

pub const MAX_DATA_CLASS_LEN: usize = 64;
const HEADER_VERSION: u8 = 1;
const GENESIS_LABEL: &[u8] = b"gridledger/genesis/v1";
const SHARE_TX_LABEL: &[u8] = b"gridledger/share-tx/v1";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ChainError {
    #[error("data class must be 1..={MAX_DATA_CLASS_LEN} bytes, got {0}")]
    DataClassLength(usize),
    #[error("block does not link to the chain tip")]
    LinkMismatch,
    #[error("merkle root does not match the block's records")]
    MerkleRootMismatch,
    #[error("recorder signature does not verify")]
    BadHeaderSignature,
    #[error("record {0} uploader signature does not verify")]
    BadRecordSignature(usize),
    #[error("timestamp {got} precedes tip timestamp {tip}")]
    TimestampRegression { tip: u64, got: u64 },
    #[error("decode: {0}")]
    Codec(#[from] CodecError),
}

/// Non-empty label of at most 64 bytes, e.g. `load` or `telemetry`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct DataClass(String);

impl DataClass {
    pub fn new(s: impl Into<String>) -> Result<Self, ChainError> {
        let s = s.into();
        if s.is_empty() || s.len() > MAX_DATA_CLASS_LEN {
            return Err(ChainError::DataClassLength(s.len()));
        }
        Ok(DataClass(s))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for DataClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RecordKind {
    GridData,
    /// Evidence of one transfer of `shared_digest` from the uploader to `receiver`.
    ShareTransaction {
        receiver: PublicKey,
        shared_digest: Digest,
    },
}

impl RecordKind {
    pub fn name(&self) -> &'static str {
        match self {
            RecordKind::GridData => "grid-data",
            RecordKind::ShareTransaction { .. } => "share-transaction",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecordMetadata {
    pub kind: RecordKind,
    pub data_class: DataClass,
    pub created_tick: u64,
}

impl RecordMetadata {
    pub fn grid_data(data_class: &str, created_tick: u64) -> Result<Self, ChainError> {
        Ok(RecordMetadata {
            kind: RecordKind::GridData,
            data_class: DataClass::new(data_class)?,
            created_tick,
        })
    }

    fn encode(&self, w: &mut Writer) {
        match &self.kind {
            RecordKind::GridData => {
                w.u8(0);
            }
            RecordKind::ShareTransaction {
                receiver,
                shared_digest,
            } => {
                w.u8(1)
                    .fixed(receiver.as_bytes())
                    .fixed(shared_digest.as_bytes());
            }
        }
        w.str(self.data_class.as_str()).u64(self.created_tick);
    }

    fn decode(r: &mut Reader<'_>) -> Result<Self, ChainError> {
        let kind = match r.u8("record kind")? {
            0 => RecordKind::GridData,
            1 => RecordKind::ShareTransaction {
                receiver: read_key(r, "receiver")?,
                shared_digest: read_digest(r, "shared digest")?,
            },
            tag => {
                return Err(CodecError::BadTag {
                    field: "record kind",
                    tag,
                }
                .into())
            }
        };
        let data_class = DataClass::new(r.str("data class", MAX_DATA_CLASS_LEN)?)?;
        let created_tick = r.u64("created tick")?;
        Ok(RecordMetadata {
            kind,
            data_class,
            created_tick,
        })
    }
}

fn read_key(r: &mut Reader<'_>, what: &'static str) -> Result<PublicKey, ChainError> {
    Ok(PublicKey::from_slice(r.fixed(PUBLIC_KEY_LEN, what)?).expect("fixed length"))
}

fn read_digest(r: &mut Reader<'_>, what: &'static str) -> Result<Digest, ChainError> {
    Ok(Digest::from_array(r.array(what)?))
}

fn read_signature(r: &mut Reader<'_>, what: &'static str) -> Result<Signature, ChainError> {
    Ok(Signature::from_slice(&r.array::<64>(what)?).expect("fixed length"))
}

/// Ledger entry: uploader key, payload digest, metadata, and the uploader's
/// signature over the digest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Record {
    pub uploader: PublicKey,
    pub payload_digest: Digest,
    pub metadata: RecordMetadata,
    pub uploader_signature: Signature,
}

impl Record {
    pub fn new(uploader: &Keypair, payload_digest: Digest, metadata: RecordMetadata) -> Self {
        Record {
            uploader: uploader.public,
            payload_digest,
            uploader_signature: uploader.sign(payload_digest.as_bytes()),
            metadata,
        }
    }

    pub fn signature_valid(&self) -> bool {
        crypto::verify(
            &self.uploader,
            self.payload_digest.as_bytes(),
            &self.uploader_signature,
        )
    }

    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        self.encode(&mut w);
        w.finish()
    }

    fn encode(&self, w: &mut Writer) {
        w.fixed(self.uploader.as_bytes())
            .fixed(self.payload_digest.as_bytes());
        self.metadata.encode(w);
        w.fixed(self.uploader_signature.as_bytes());
    }

    fn decode(r: &mut Reader<'_>) -> Result<Self, ChainError> {
        Ok(Record {
            uploader: read_key(r, "uploader")?,
            payload_digest: read_digest(r, "payload digest")?,
            metadata: RecordMetadata::decode(r)?,
            uploader_signature: read_signature(r, "uploader signature")?,
        })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ChainError> {
        let mut r = Reader::new(bytes);
        let rec = Record::decode(&mut r)?;
        r.finish()?;
        Ok(rec)
    }

    pub fn leaf(&self) -> Digest {
        merkle::leaf_digest(&self.canonical_bytes())
    }
}

/// Off-chain description of a share, whose canonical bytes are the payload of
/// the corresponding share-transaction record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShareTransaction {
    pub sender: PublicKey,
    pub receiver: PublicKey,
    pub payload_digest: Digest,
    pub tick: u64,
}

impl ShareTransaction {
    pub fn canonical_bytes(&self) -> Vec<u8> {
        Writer::new()
            .fixed(SHARE_TX_LABEL)
            .fixed(self.sender.as_bytes())
            .fixed(self.receiver.as_bytes())
            .fixed(self.payload_digest.as_bytes())
            .u64(self.tick)
            .finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ChainError> {
        let mut r = Reader::new(bytes);
        if r.fixed(SHARE_TX_LABEL.len(), "share label")? != SHARE_TX_LABEL {
            return Err(CodecError::Invalid("share label").into());
        }
        let tx = ShareTransaction {
            sender: read_key(&mut r, "sender")?,
            receiver: read_key(&mut r, "receiver")?,
            payload_digest: read_digest(&mut r, "shared digest")?,
            tick: r.u64("tick")?,
        };
        r.finish()?;
        Ok(tx)
    }

    pub fn metadata(&self) -> RecordMetadata {
        RecordMetadata {
            kind: RecordKind::ShareTransaction {
                receiver: self.receiver,
                shared_digest: self.payload_digest,
            },
            data_class: DataClass::new("share").expect("static label"),
            created_tick: self.tick,
        }
    }

    /// Rebuild the transaction a share record claims to carry.
    pub fn from_record(record: &Record) -> Option<Self> {
        match &record.metadata.kind {
            RecordKind::ShareTransaction {
                receiver,
                shared_digest,
            } => Some(ShareTransaction {
                sender: record.uploader,
                receiver: *receiver,
                payload_digest: *shared_digest,
                tick: record.metadata.created_tick,
            }),
            RecordKind::GridData => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockHeader {
    pub prev_block_digest: Digest,
    pub timestamp_tick: u64,
    pub merkle_root: Digest,
    pub recorder_public_key: PublicKey,
    pub recorder_signature: Signature,
}

impl BlockHeader {
    /// The bytes the recorder signs: every header field except the signature.
    pub fn signing_bytes(&self) -> Vec<u8> {
        Writer::new()
            .u8(HEADER_VERSION)
            .fixed(self.prev_block_digest.as_bytes())
            .u64(self.timestamp_tick)
            .fixed(self.merkle_root.as_bytes())
            .fixed(self.recorder_public_key.as_bytes())
            .finish()
    }

    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut bytes = self.signing_bytes();
        bytes.extend_from_slice(self.recorder_signature.as_bytes());
        bytes
    }

    pub fn digest(&self) -> Digest {
        crypto::digest(&self.canonical_bytes())
    }

    pub fn signature_valid(&self) -> bool {
        crypto::verify(
            &self.recorder_public_key,
            &self.signing_bytes(),
            &self.recorder_signature,
        )
    }

    fn decode(r: &mut Reader<'_>) -> Result<Self, ChainError> {
        let version = r.u8("header version")?;
        if version != HEADER_VERSION {
            return Err(CodecError::BadTag {
                field: "header version",
                tag: version,
            }
            .into());
        }
        Ok(BlockHeader {
            prev_block_digest: read_digest(r, "prev digest")?,
            timestamp_tick: r.u64("timestamp")?,
            merkle_root: read_digest(r, "merkle root")?,
            recorder_public_key: read_key(r, "recorder key")?,
            recorder_signature: read_signature(r, "recorder signature")?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Block {
    pub header: BlockHeader,
    pub records: Vec<Record>,
}

pub fn records_root(records: &[Record]) -> Digest {
    let leaves: Vec<Digest> = records.iter().map(Record::leaf).collect();
    merkle::build_tree(&leaves).root()
}

impl Block {
    /// Build and sign a block over `records` in the given order.
    pub fn seal(recorder: &Keypair, prev_block_digest: Digest, tick: u64, records: Vec<Record>) -> Self {
        let mut header = BlockHeader {
            prev_block_digest,
            timestamp_tick: tick,
            merkle_root: records_root(&records),
            recorder_public_key: recorder.public,
            recorder_signature: Signature::from_slice(&[0u8; 64]).expect("64 bytes"),
        };
        header.recorder_signature = recorder.sign(&header.signing_bytes());
        Block { header, records }
    }

    pub fn digest(&self) -> Digest {
        self.header.digest()
    }

    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.fixed(&self.header.canonical_bytes())
            .u32(self.records.len() as u32);
        for rec in &self.records {
            w.bytes(&rec.canonical_bytes());
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ChainError> {
        let mut r = Reader::new(bytes);
        let header = BlockHeader::decode(&mut r)?;
        let count = r.u32("record count")? as usize;
        let mut records = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            records.push(Record::from_bytes(r.bytes("record")?)?);
        }
        r.finish()?;
        Ok(Block { header, records })
    }

    /// Check this block against its predecessor (`None` for genesis).
    pub fn check_against(&self, prev: Option<&BlockHeader>) -> Result<(), ChainError> {
        let expected_prev = prev.map_or(Digest::ZERO, BlockHeader::digest);
        if self.header.prev_block_digest != expected_prev {
            return Err(ChainError::LinkMismatch);
        }
        if let Some(prev) = prev {
            if self.header.timestamp_tick < prev.timestamp_tick {
                return Err(ChainError::TimestampRegression {
                    tip: prev.timestamp_tick,
                    got: self.header.timestamp_tick,
                });
            }
        }
        if records_root(&self.records) != self.header.merkle_root {
            return Err(ChainError::MerkleRootMismatch);
        }
        if !self.header.signature_valid() {
            return Err(ChainError::BadHeaderSignature);
        }
        if let Some(i) = self.records.iter().position(|r| !r.signature_valid()) {
            return Err(ChainError::BadRecordSignature(i));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GenesisConfig {
    pub network_id: String,
}

/// Key that signs the genesis block of `network_id`.
pub fn bootstrap_keypair(network_id: &str) -> Keypair {
    let seed = crypto::digest_parts(&[GENESIS_LABEL, network_id.as_bytes()]);
    crypto::generate_keypair(seed.as_bytes()).expect("32-byte seed")
}

pub fn genesis(config: &GenesisConfig) -> Block {
    Block::seal(&bootstrap_keypair(&config.network_id), Digest::ZERO, 0, Vec::new())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViolationReason {
    LinkMismatch,
    TimestampRegression,
    MerkleRootMismatch,
    BadHeaderSignature,
    BadRecordSignature(usize),
    /// The block's bytes could not be decoded (import only).
    Malformed,
}

impl fmt::Display for ViolationReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ViolationReason::LinkMismatch => f.write_str("link mismatch"),
            ViolationReason::TimestampRegression => f.write_str("timestamp regression"),
            ViolationReason::MerkleRootMismatch => f.write_str("merkle root mismatch"),
            ViolationReason::BadHeaderSignature => f.write_str("bad recorder signature"),
            ViolationReason::BadRecordSignature(i) => write!(f, "bad signature on record {i}"),
            ViolationReason::Malformed => f.write_str("malformed block encoding"),
        }
    }
}

impl From<&ChainError> for ViolationReason {
    fn from(e: &ChainError) -> Self {
        match e {
            ChainError::LinkMismatch => ViolationReason::LinkMismatch,
            ChainError::TimestampRegression { .. } => ViolationReason::TimestampRegression,
            ChainError::MerkleRootMismatch => ViolationReason::MerkleRootMismatch,
            ChainError::BadHeaderSignature => ViolationReason::BadHeaderSignature,
            ChainError::BadRecordSignature(i) => ViolationReason::BadRecordSignature(*i),
            ChainError::DataClassLength(_) | ChainError::Codec(_) => ViolationReason::Malformed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Violation {
    pub index: usize,
    pub reason: ViolationReason,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "block {}: {}", self.index, self.reason)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TraceQuery {
    Uploader(PublicKey),
    Digest(Digest),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceEntry {
    pub block_index: usize,
    pub record_index: usize,
    pub record: Record,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Chain {
    blocks: Vec<Block>,
}

impl Chain {
    pub fn new(genesis: Block) -> Self {
        Chain {
            blocks: vec![genesis],
        }
    }

    /// Wrap blocks without checking them; see [`Chain::verify`].
    pub fn from_blocks_unchecked(blocks: Vec<Block>) -> Self {
        Chain { blocks }
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn into_blocks(self) -> Vec<Block> {
        self.blocks
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn tip(&self) -> Option<&Block> {
        self.blocks.last()
    }

    pub fn tip_digest(&self) -> Digest {
        self.tip().map_or(Digest::ZERO, Block::digest)
    }

    pub fn tip_tick(&self) -> u64 {
        self.tip().map_or(0, |b| b.header.timestamp_tick)
    }

    pub fn append(&mut self, block: Block) -> Result<(), ChainError> {
        block.check_against(self.tip().map(|b| &b.header))?;
        self.blocks.push(block);
        Ok(())
    }

    /// First block, in chain order, that breaks a link, root, timestamp or
    /// signature invariant.
    pub fn verify(&self) -> Result<(), Violation> {
        let mut prev: Option<&BlockHeader> = None;
        for (index, block) in self.blocks.iter().enumerate() {
            block.check_against(prev).map_err(|e| Violation {
                index,
                reason: (&e).into(),
            })?;
            prev = Some(&block.header);
        }
        Ok(())
    }

    pub fn records(&self) -> impl Iterator<Item = (usize, usize, &Record)> {
        self.blocks.iter().enumerate().flat_map(|(b, block)| {
            block.records.iter().enumerate().map(move |(r, rec)| (b, r, rec))
        })
    }

    pub fn contains_record(&self, record: &Record) -> bool {
        self.records().any(|(_, _, r)| r == record)
    }

    /// Grid-data record that first introduced `payload_digest`.
    pub fn origin_of(&self, payload_digest: &Digest) -> Option<&Record> {
        self.records().map(|(_, _, r)| r).find(|r| {
            r.metadata.kind == RecordKind::GridData && r.payload_digest == *payload_digest
        })
    }

    /// Records matching `query`, in chain order. A digest query also returns
    /// every share transaction that references the digest.
    pub fn trace(&self, query: &TraceQuery) -> Vec<TraceEntry> {
        self.records()
            .filter(|(_, _, rec)| match query {
                TraceQuery::Uploader(key) => rec.uploader == *key,
                TraceQuery::Digest(d) => {
                    rec.payload_digest == *d
                        || matches!(&rec.metadata.kind,
                            RecordKind::ShareTransaction { shared_digest, .. } if shared_digest == d)
                }
            })
            .map(|(block_index, record_index, rec)| TraceEntry {
                block_index,
                record_index,
                record: rec.clone(),
            })
            .collect()
    }

    /// One hex-encoded canonical block per line.
    pub fn export(&self) -> String {
        let mut out = String::new();
        for block in &self.blocks {
            out.push_str(&hex::encode(block.canonical_bytes()));
            out.push('\n');
        }
        out
    }

    pub fn import(text: &str) -> Result<Self, ImportError> {
        let mut blocks = Vec::new();
        for (i, line) in parse_export(text)?.into_iter().enumerate() {
            blocks.push(line.map_err(|e| ImportError::Block { line: i + 1, source: e })?);
        }
        Ok(Chain { blocks })
    }
}

#[derive(Debug, Error)]
pub enum ImportError {
    #[error("chain export is empty")]
    Empty,
    #[error("line {line}: not hex")]
    Hex { line: usize },
    #[error("line {line}: {source}")]
    Block { line: usize, source: ChainError },
}

/// Split an export into per-line decode results. Blank lines are skipped;
/// lines that are not hex fail the whole file.
pub fn parse_export(text: &str) -> Result<Vec<Result<Block, ChainError>>, ImportError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let bytes = hex::decode(line).map_err(|_| ImportError::Hex { line: i + 1 })?;
        out.push(Block::from_bytes(&bytes));
    }
    if out.is_empty() {
        return Err(ImportError::Empty);
    }
    Ok(out)
}

/// Verify an export whose lines may not all decode; an undecodable block is
/// reported as a [`ViolationReason::Malformed`] violation at its index.
pub fn verify_export(text: &str) -> Result<Result<(), Violation>, ImportError> {
    let mut prev: Option<BlockHeader> = None;
    for (index, line) in parse_export(text)?.into_iter().enumerate() {
        let block = match line {
            Ok(b) => b,
            Err(_) => {
                return Ok(Err(Violation {
                    index,
                    reason: ViolationReason::Malformed,
                }))
            }
        };
        if let Err(e) = block.check_against(prev.as_ref()) {
            return Ok(Err(Violation {
                index,
                reason: (&e).into(),
            }));
        }
        prev = Some(block.header);
    }
    Ok(Ok(()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key(b: u8) -> Keypair {
        crypto::generate_keypair(&[b; 32]).unwrap()
    }

    fn record(uploader: &Keypair, payload: &[u8], class: &str) -> Record {
        Record::new(
            uploader,
            crypto::digest(payload),
            RecordMetadata::grid_data(class, 5).unwrap(),
        )
    }

    fn chain_of(n: usize) -> Chain {
        let mut chain = Chain::new(genesis(&GenesisConfig {
            network_id: "test".into(),
        }));
        let rec = key(9);
        let up = key(3);
        for i in 1..n {
            let records = (0..3)
                .map(|j| record(&up, format!("{i}-{j}").as_bytes(), "load"))
                .collect();
            let b = Block::seal(&rec, chain.tip_digest(), i as u64 * 600, records);
            chain.append(b).unwrap();
        }
        chain
    }

    #[test]
    fn data_class_bounds() {
        assert!(DataClass::new("").is_err());
        assert!(DataClass::new("x".repeat(64)).is_ok());
        assert_eq!(
            DataClass::new("x".repeat(65)).unwrap_err(),
            ChainError::DataClassLength(65)
        );
    }

    #[test]
    fn canonical_record_bytes() {
        let up = key(1);
        let a = record(&up, b"p", "load");
        assert_eq!(a.canonical_bytes(), a.canonical_bytes());
        let b = record(&up, b"p", "telemetry");
        assert_ne!(a.canonical_bytes(), b.canonical_bytes());
        assert_eq!(Record::from_bytes(&a.canonical_bytes()).unwrap(), a);
    }

    #[test]
    fn genesis_shape() {
        let cfg = GenesisConfig {
            network_id: "grid".into(),
        };
        let g = genesis(&cfg);
        assert_eq!(g.header.prev_block_digest, Digest::ZERO);
        assert_eq!(g.header.merkle_root, merkle::empty_root());
        assert!(g.records.is_empty());
        assert_eq!(g.canonical_bytes(), genesis(&cfg).canonical_bytes());
        assert_eq!(g.header.recorder_public_key, bootstrap_keypair("grid").public);
    }

    #[test]
    fn append_errors_are_distinct() {
        let mut chain = chain_of(3);
        let rec = key(9);
        let up = key(3);

        let stale = chain.blocks()[1].digest();
        let b = Block::seal(&rec, stale, 2000, vec![]);
        assert_eq!(chain.append(b).unwrap_err(), ChainError::LinkMismatch);

        let b = Block::seal(&rec, chain.tip_digest(), 1, vec![]);
        assert!(matches!(
            chain.append(b).unwrap_err(),
            ChainError::TimestampRegression { .. }
        ));

        let mut b = Block::seal(
            &rec,
            chain.tip_digest(),
            2000,
            vec![record(&up, b"a", "load"), record(&up, b"b", "load")],
        );
        b.records.swap(0, 1);
        assert_eq!(chain.append(b).unwrap_err(), ChainError::MerkleRootMismatch);

        let mut b = Block::seal(&rec, chain.tip_digest(), 2000, vec![]);
        b.header.recorder_public_key = up.public;
        assert_eq!(chain.append(b).unwrap_err(), ChainError::BadHeaderSignature);

        let mut forged = record(&up, b"c", "load");
        forged.uploader = rec.public;
        let b = Block::seal(&rec, chain.tip_digest(), 2000, vec![forged]);
        assert_eq!(chain.append(b).unwrap_err(), ChainError::BadRecordSignature(0));

        let len = chain.len();
        chain
            .append(Block::seal(&rec, chain.tip_digest(), 1800, vec![]))
            .unwrap();
        assert_eq!(chain.len(), len + 1);
        // Equal ticks are allowed.
        chain
            .append(Block::seal(&rec, chain.tip_digest(), 1800, vec![]))
            .unwrap();
    }

    #[test]
    fn verify_reports_first_violation() {
        let chain = chain_of(10);
        assert_eq!(chain.verify(), Ok(()));

        let mut blocks = chain.clone().into_blocks();
        let mut raw = *blocks[3].records[0].payload_digest.as_bytes();
        raw[0] ^= 1;
        blocks[3].records[0].payload_digest = Digest::from_array(raw);
        assert_eq!(
            Chain::from_blocks_unchecked(blocks).verify(),
            Err(Violation {
                index: 3,
                reason: ViolationReason::MerkleRootMismatch
            })
        );

        // Re-root and re-sign with another key while keeping the recorder key.
        let mut blocks = chain.into_blocks();
        blocks[3].records.pop();
        blocks[3].header.merkle_root = records_root(&blocks[3].records);
        blocks[3].header.recorder_signature = key(42).sign(&blocks[3].header.signing_bytes());
        assert_eq!(
            Chain::from_blocks_unchecked(blocks).verify(),
            Err(Violation {
                index: 3,
                reason: ViolationReason::BadHeaderSignature
            })
        );
    }

    #[test]
    fn export_round_trip_and_malformed_line() {
        let chain = chain_of(4);
        let text = chain.export();
        assert_eq!(Chain::import(&text).unwrap(), chain);
        assert_eq!(verify_export(&text).unwrap(), Ok(()));
        assert!(matches!(Chain::import(""), Err(ImportError::Empty)));
        assert!(matches!(Chain::import("zz\n"), Err(ImportError::Hex { line: 1 })));

        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        let cut = lines[2].len() - 2;
        lines[2].truncate(cut);
        let v = verify_export(&lines.join("\n")).unwrap().unwrap_err();
        assert_eq!(v.index, 2);
        assert_eq!(v.reason, ViolationReason::Malformed);
    }

    #[test]
    fn share_transaction_bytes_round_trip() {
        let tx = ShareTransaction {
            sender: key(1).public,
            receiver: key(2).public,
            payload_digest: crypto::digest(b"x"),
            tick: 77,
        };
        assert_eq!(ShareTransaction::from_bytes(&tx.canonical_bytes()).unwrap(), tx);
        let rec = Record::new(&key(1), crypto::digest(&tx.canonical_bytes()), tx.metadata());
        assert_eq!(ShareTransaction::from_record(&rec), Some(tx));
    }

    #[test]
    fn trace_by_digest_and_key() {
        let (a, b) = (key(1), key(2));
        let d = crypto::digest(b"reading");
        let origin = record(&a, b"reading", "load");
        let other = record(&b, b"other", "load");
        let tx = ShareTransaction {
            sender: a.public,
            receiver: b.public,
            payload_digest: d,
            tick: 9,
        };
        let share = Record::new(&a, crypto::digest(&tx.canonical_bytes()), tx.metadata());
        let rec = key(9);
        let mut chain = Chain::new(genesis(&GenesisConfig {
            network_id: "t".into(),
        }));
        chain
            .append(Block::seal(&rec, chain.tip_digest(), 600, vec![origin.clone(), other]))
            .unwrap();
        chain
            .append(Block::seal(&rec, chain.tip_digest(), 1200, vec![share.clone()]))
            .unwrap();

        let hits = chain.trace(&TraceQuery::Digest(d));
        assert_eq!(hits.len(), 2);
        assert_eq!((hits[0].block_index, hits[0].record_index), (1, 0));
        assert_eq!(hits[1].record, share);
        assert!(chain.trace(&TraceQuery::Digest(crypto::digest(b"?"))).is_empty());
        let by_b = chain.trace(&TraceQuery::Uploader(b.public));
        assert_eq!(by_b.len(), 1);
        assert!(by_b.iter().all(|e| e.record.uploader == b.public));
        assert_eq!(chain.origin_of(&d), Some(&origin));
    }
}
