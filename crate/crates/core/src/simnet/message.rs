//! Wire messages exchanged over the simulated bus.

use crate::chain::Record;
use crate::codec::{CodecError, Reader, Writer};
use crate::credit::NodeId;
use crate::crypto::{self, Digest, Envelope, PublicKey, PUBLIC_KEY_LEN};
use crate::record_protocol::{ProposedBlock, ProtocolError, UploadEnvelope, Vote, VALIDATORS_PER_BLOCK};
use crate::share_protocol::ShareEnvelope;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Message {
    UploadRequest { upload_id: u64, uploader: PublicKey },
    UploadGrant { upload_id: u64, granted: bool, recorder: PublicKey },
    UploadEnvelope { upload_id: u64, envelope: UploadEnvelope },
    Proposal(ProposedBlock),
    Vote(Vote),
    CommitNotice { proposal: ProposedBlock, votes: Vec<Vote> },
    /// Pending records passed from an off-duty recorder to the duty recorder.
    RecordHandoff(Vec<Record>),
    ShareEnvelope(ShareEnvelope),
}

const MAX_RECORDS: usize = 1 << 20;

impl Message {
    pub fn kind(&self) -> &'static str {
        match self {
            Message::UploadRequest { .. } => "upload-request",
            Message::UploadGrant { .. } => "upload-grant",
            Message::UploadEnvelope { .. } => "upload-envelope",
            Message::Proposal(_) => "proposal",
            Message::Vote(_) => "vote",
            Message::CommitNotice { .. } => "commit-notice",
            Message::RecordHandoff(_) => "record-handoff",
            Message::ShareEnvelope(_) => "share-envelope",
        }
    }

    fn tag(&self) -> u8 {
        match self {
            Message::UploadRequest { .. } => 1,
            Message::UploadGrant { .. } => 2,
            Message::UploadEnvelope { .. } => 3,
            Message::Proposal(_) => 4,
            Message::Vote(_) => 5,
            Message::CommitNotice { .. } => 6,
            Message::RecordHandoff(_) => 7,
            Message::ShareEnvelope(_) => 8,
        }
    }

    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.u8(self.tag());
        match self {
            Message::UploadRequest { upload_id, uploader } => {
                w.u64(*upload_id).fixed(uploader.as_bytes());
            }
            Message::UploadGrant {
                upload_id,
                granted,
                recorder,
            } => {
                w.u64(*upload_id).u8(*granted as u8).fixed(recorder.as_bytes());
            }
            Message::UploadEnvelope { upload_id, envelope } => {
                w.u64(*upload_id).bytes(&envelope.canonical_bytes());
            }
            Message::Proposal(p) => {
                w.bytes(&p.canonical_bytes());
            }
            Message::Vote(v) => {
                w.bytes(&v.canonical_bytes());
            }
            Message::CommitNotice { proposal, votes } => {
                w.bytes(&proposal.canonical_bytes()).u32(votes.len() as u32);
                for v in votes {
                    w.bytes(&v.canonical_bytes());
                }
            }
            Message::RecordHandoff(records) => {
                w.u32(records.len() as u32);
                for r in records {
                    w.bytes(&r.canonical_bytes());
                }
            }
            Message::ShareEnvelope(e) => {
                w.bytes(&e.canonical_bytes());
            }
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ProtocolError> {
        let mut r = Reader::new(bytes);
        let key = |r: &mut Reader<'_>, what| {
            r.fixed(PUBLIC_KEY_LEN, what)
                .map(|b| PublicKey::from_slice(b).expect("fixed length"))
        };
        let msg = match r.u8("message tag")? {
            1 => Message::UploadRequest {
                upload_id: r.u64("upload id")?,
                uploader: key(&mut r, "uploader")?,
            },
            2 => Message::UploadGrant {
                upload_id: r.u64("upload id")?,
                granted: match r.u8("granted")? {
                    0 => false,
                    1 => true,
                    tag => return Err(CodecError::BadTag { field: "granted", tag }.into()),
                },
                recorder: key(&mut r, "recorder")?,
            },
            3 => Message::UploadEnvelope {
                upload_id: r.u64("upload id")?,
                envelope: UploadEnvelope::from_bytes(r.bytes("upload envelope")?)?,
            },
            4 => Message::Proposal(ProposedBlock::from_bytes(r.bytes("proposal")?)?),
            5 => Message::Vote(Vote::from_bytes(r.bytes("vote")?)?),
            6 => {
                let proposal = ProposedBlock::from_bytes(r.bytes("proposal")?)?;
                let n = r.u32("vote count")? as usize;
                if n > VALIDATORS_PER_BLOCK {
                    return Err(CodecError::Invalid("vote count").into());
                }
                let votes = (0..n)
                    .map(|_| Vote::from_bytes(r.bytes("vote")?))
                    .collect::<Result<_, _>>()?;
                Message::CommitNotice { proposal, votes }
            }
            7 => {
                let n = r.u32("record count")? as usize;
                if n > MAX_RECORDS {
                    return Err(CodecError::Invalid("record count").into());
                }
                let mut records = Vec::with_capacity(n.min(1024));
                for _ in 0..n {
                    records.push(Record::from_bytes(r.bytes("record")?)?);
                }
                Message::RecordHandoff(records)
            }
            8 => Message::ShareEnvelope(
                ShareEnvelope::from_bytes(r.bytes("share envelope")?)?,
            ),
            tag => {
                return Err(CodecError::BadTag {
                    field: "message tag",
                    tag,
                }
                .into())
            }
        };
        r.finish()?;
        Ok(msg)
    }

    /// Every digital envelope the message carries.
    pub fn envelopes(&self) -> Vec<&Envelope> {
        match self {
            Message::UploadEnvelope { envelope, .. } => vec![&envelope.payload_envelope],
            Message::ShareEnvelope(e) => vec![&e.payload_envelope],
            _ => Vec::new(),
        }
    }

    /// Flip one ciphertext bit of the first carried envelope.
    pub fn tamper_ciphertext(&mut self) -> bool {
        let env = match self {
            Message::UploadEnvelope { envelope, .. } => &mut envelope.payload_envelope,
            Message::ShareEnvelope(e) => &mut e.payload_envelope,
            _ => return false,
        };
        match env.ciphertext.first_mut() {
            Some(b) => {
                *b ^= 0x01;
                true
            }
            None => false,
        }
    }
}

/// One message in flight.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SimEvent {
    pub deliver_tick: u64,
    pub seq: u64,
    pub src: NodeId,
    pub dst: NodeId,
    pub message: Message,
}

impl SimEvent {
    pub fn digest(&self) -> Digest {
        crypto::digest(&self.message.canonical_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::{genesis, Chain, GenesisConfig, RecordMetadata};
    use crate::crypto::generate_keypair;
    use crate::record_protocol::{prepare_upload, seal_block, VoteVerdict};
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn every_kind_round_trips() {
        let kp = generate_keypair(&[5; 32]).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let meta = RecordMetadata::grid_data("load", 3).unwrap();
        let env = prepare_upload(&kp, &kp.public, b"abc", meta.clone(), &mut rng);
        let chain = Chain::new(genesis(&GenesisConfig {
            network_id: "m".into(),
        }));
        let rec = Record::new(&kp, crypto::digest(b"abc"), meta);
        let proposal = seal_block(&kp, 1, vec![rec.clone()], &chain, 600, 600, 1, [2, 3, 4]).unwrap();
        let vote = Vote::new(2, &kp, proposal.block.digest(), VoteVerdict::Erroneous(vec![0]));
        let share = ShareEnvelope {
            sender: kp.public,
            receiver: kp.public,
            payload_digest: crypto::digest(b"abc"),
            payload_envelope: env.payload_envelope.clone(),
            signed_digest: env.signed_digest,
        };
        let all = vec![
            Message::UploadRequest {
                upload_id: 7,
                uploader: kp.public,
            },
            Message::UploadGrant {
                upload_id: 7,
                granted: true,
                recorder: kp.public,
            },
            Message::UploadEnvelope {
                upload_id: 7,
                envelope: env,
            },
            Message::Proposal(proposal.clone()),
            Message::Vote(vote.clone()),
            Message::CommitNotice {
                proposal,
                votes: vec![vote.clone(), vote.clone(), vote],
            },
            Message::RecordHandoff(vec![rec.clone(), rec]),
            Message::ShareEnvelope(share),
        ];
        for m in all {
            let bytes = m.canonical_bytes();
            assert_eq!(Message::from_bytes(&bytes).unwrap(), m, "{}", m.kind());
            let mut long = bytes.clone();
            long.push(0);
            assert!(Message::from_bytes(&long).is_err());
            assert!(Message::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        }
        assert!(Message::from_bytes(&[0]).is_err());
    }
}
