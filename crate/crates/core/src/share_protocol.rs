//! Peer-to-peer data sharing.
//!
//! The owner opens its at-rest copy, seals the plaintext to the receiver and
//! signs the digest. The receiver decrypts, re-digests and checks the
//! signature, which proves both integrity and origin. The transfer is then
//! recorded on chain as a share-transaction record submitted by the sender
//! through the normal upload pathway.

use rand::{CryptoRng, RngCore};
use thiserror::Error;

use crate::chain::Chain;
use crate::codec::{CodecError, Reader, Writer};
use crate::crypto::{self, encrypt_for_with_rng, Digest, Envelope, Keypair, PublicKey, Signature, PUBLIC_KEY_LEN};
use crate::datastore::DataStore;
use crate::record_protocol::{prepare_upload, UploadEnvelope};

pub use crate::chain::ShareTransaction;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ShareError {
    #[error("digest {0} has no grid-data record on chain")]
    DigestNotOnChain(Digest),
    #[error("sender does not own {0}")]
    NotOwner(Digest),
    #[error("no live replica of {0} in the data store")]
    DatastoreMiss(Digest),
    #[error("share transaction names a different sender")]
    SenderMismatch,
    #[error("sender cannot open its stored copy of {0}")]
    StoredCopyUnreadable(Digest),
}

impl ShareError {
    pub fn name(&self) -> &'static str {
        match self {
            ShareError::DigestNotOnChain(_) => "digest-not-on-chain",
            ShareError::NotOwner(_) => "not-owner",
            ShareError::DatastoreMiss(_) => "datastore-miss",
            ShareError::SenderMismatch => "sender-mismatch",
            ShareError::StoredCopyUnreadable(_) => "stored-copy-unreadable",
        }
    }
}

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum ShareRejection {
    #[error("share could not be decrypted")]
    DecryptionFailure,
    #[error("payload digest does not match the signed digest")]
    DigestMismatch,
    #[error("sender signature does not verify")]
    SignatureInvalid,
}

impl ShareRejection {
    pub fn name(self) -> &'static str {
        match self {
            ShareRejection::DecryptionFailure => "decryption-failure",
            ShareRejection::DigestMismatch => "digest-mismatch",
            ShareRejection::SignatureInvalid => "signature-invalid",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShareEnvelope {
    pub sender: PublicKey,
    pub receiver: PublicKey,
    pub payload_digest: Digest,
    pub payload_envelope: Envelope,
    pub signed_digest: Signature,
}

impl ShareEnvelope {
    pub fn canonical_bytes(&self) -> Vec<u8> {
        Writer::new()
            .fixed(self.sender.as_bytes())
            .fixed(self.receiver.as_bytes())
            .fixed(self.payload_digest.as_bytes())
            .bytes(&self.payload_envelope.to_bytes())
            .fixed(self.signed_digest.as_bytes())
            .finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CodecError> {
        let mut r = Reader::new(bytes);
        let key = |r: &mut Reader<'_>, what| {
            r.fixed(PUBLIC_KEY_LEN, what)
                .map(|b| PublicKey::from_slice(b).expect("fixed length"))
        };
        let sender = key(&mut r, "sender")?;
        let receiver = key(&mut r, "receiver")?;
        let payload_digest = Digest::from_array(r.array("digest")?);
        let payload_envelope =
            Envelope::from_bytes(r.bytes("envelope")?).map_err(|_| CodecError::Invalid("envelope"))?;
        let signed_digest = Signature::from_slice(&r.array::<64>("signature")?).expect("64 bytes");
        r.finish()?;
        Ok(ShareEnvelope {
            sender,
            receiver,
            payload_digest,
            payload_envelope,
            signed_digest,
        })
    }
}

/// Build a share of `payload_digest` from its owner to `receiver`.
pub fn initiate_share<R: RngCore + CryptoRng>(
    sender: &Keypair,
    receiver: &PublicKey,
    payload_digest: &Digest,
    chain: &Chain,
    store: &DataStore,
    rng: &mut R,
) -> Result<ShareEnvelope, ShareError> {
    let origin = chain
        .origin_of(payload_digest)
        .ok_or(ShareError::DigestNotOnChain(*payload_digest))?;
    if origin.uploader != sender.public {
        return Err(ShareError::NotOwner(*payload_digest));
    }
    let stored = store
        .get(payload_digest)
        .ok_or(ShareError::DatastoreMiss(*payload_digest))?;
    let plaintext = sender
        .decrypt(&stored.ciphertext)
        .map_err(|_| ShareError::StoredCopyUnreadable(*payload_digest))?;
    if crypto::digest(&plaintext) != *payload_digest {
        return Err(ShareError::StoredCopyUnreadable(*payload_digest));
    }
    Ok(ShareEnvelope {
        sender: sender.public,
        receiver: *receiver,
        payload_digest: *payload_digest,
        payload_envelope: encrypt_for_with_rng(receiver, &plaintext, rng),
        signed_digest: sender.sign(payload_digest.as_bytes()),
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeliveredShare {
    pub payload: Vec<u8>,
    /// Sender whose signature over the payload digest verified.
    pub sender: PublicKey,
    pub payload_digest: Digest,
}

pub fn receive_share(receiver: &Keypair, envelope: &ShareEnvelope) -> Result<DeliveredShare, ShareRejection> {
    let payload = receiver
        .decrypt(&envelope.payload_envelope)
        .map_err(|_| ShareRejection::DecryptionFailure)?;
    let digest = crypto::digest(&payload);
    if digest != envelope.payload_digest {
        return Err(ShareRejection::DigestMismatch);
    }
    if !crypto::verify(&envelope.sender, digest.as_bytes(), &envelope.signed_digest) {
        return Err(ShareRejection::SignatureInvalid);
    }
    Ok(DeliveredShare {
        payload,
        sender: envelope.sender,
        payload_digest: digest,
    })
}

/// Upload envelope carrying `tx` as a share-transaction record.
pub fn record_share<R: RngCore + CryptoRng>(
    tx: &ShareTransaction,
    sender: &Keypair,
    recorder: &PublicKey,
    rng: &mut R,
) -> Result<UploadEnvelope, ShareError> {
    if tx.sender != sender.public {
        return Err(ShareError::SenderMismatch);
    }
    Ok(prepare_upload(sender, recorder, &tx.canonical_bytes(), tx.metadata(), rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::{genesis, Block, GenesisConfig, RecordKind, TraceQuery};
    use crate::crypto::generate_keypair;
    use crate::record_protocol::{receive_upload, PermissionList};
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    struct World {
        owner: Keypair,
        receiver: Keypair,
        third: Keypair,
        recorder: Keypair,
        chain: Chain,
        store: DataStore,
        perms: PermissionList,
        rng: ChaCha20Rng,
        digest: Digest,
    }

    fn world() -> World {
        let k = |b| generate_keypair(&[b; 32]).unwrap();
        let (owner, receiver, third, recorder) = (k(1), k(2), k(3), k(4));
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let perms = PermissionList::new([owner.public, receiver.public]);
        let mut chain = Chain::new(genesis(&GenesisConfig {
            network_id: "share".into(),
        }));
        let mut store = DataStore::with_units(3);
        let env = crate::record_protocol::prepare_grid_upload(
            &owner,
            &recorder.public,
            b"feeder 7 telemetry",
            "telemetry",
            1,
            &mut rng,
        )
        .unwrap();
        let acc = receive_upload(&recorder, &env, &perms, &mut rng).unwrap();
        store.put(acc.stored, 2).unwrap();
        chain
            .append(Block::seal(&recorder, chain.tip_digest(), 600, vec![acc.record.clone()]))
            .unwrap();
        World {
            digest: acc.record.payload_digest,
            owner,
            receiver,
            third,
            recorder,
            chain,
            store,
            perms,
            rng,
        }
    }

    #[test]
    fn honest_share_delivers_and_confirms_sender() {
        let mut w = world();
        let env = initiate_share(&w.owner, &w.receiver.public, &w.digest, &w.chain, &w.store, &mut w.rng).unwrap();
        assert_eq!(ShareEnvelope::from_bytes(&env.canonical_bytes()).unwrap(), env);
        let got = receive_share(&w.receiver, &env).unwrap();
        assert_eq!(got.payload, b"feeder 7 telemetry");
        assert_eq!(got.sender, w.owner.public);
        // Replayed to a third node.
        assert_eq!(receive_share(&w.third, &env).unwrap_err(), ShareRejection::DecryptionFailure);
    }

    #[test]
    fn ownership_and_existence_checks() {
        let mut w = world();
        assert_eq!(
            initiate_share(&w.receiver, &w.third.public, &w.digest, &w.chain, &w.store, &mut w.rng).unwrap_err(),
            ShareError::NotOwner(w.digest)
        );
        let unknown = crypto::digest(b"never recorded");
        assert_eq!(
            initiate_share(&w.owner, &w.receiver.public, &unknown, &w.chain, &w.store, &mut w.rng).unwrap_err(),
            ShareError::DigestNotOnChain(unknown)
        );
        let empty = DataStore::with_units(3);
        assert_eq!(
            initiate_share(&w.owner, &w.receiver.public, &w.digest, &w.chain, &empty, &mut w.rng).unwrap_err(),
            ShareError::DatastoreMiss(w.digest)
        );
    }

    #[test]
    fn in_flight_tampering_is_caught() {
        let mut w = world();
        let env = initiate_share(&w.owner, &w.receiver.public, &w.digest, &w.chain, &w.store, &mut w.rng).unwrap();
        for i in 0..env.payload_envelope.ciphertext.len() {
            let mut bad = env.clone();
            bad.payload_envelope.ciphertext[i] ^= 0x10;
            let err = receive_share(&w.receiver, &bad).unwrap_err();
            assert!(matches!(err, ShareRejection::DecryptionFailure | ShareRejection::DigestMismatch));
        }
        let mut forged = env.clone();
        forged.sender = w.third.public;
        assert_eq!(receive_share(&w.receiver, &forged).unwrap_err(), ShareRejection::SignatureInvalid);
        let mut relabelled = env;
        relabelled.payload_digest = crypto::digest(b"other");
        assert_eq!(receive_share(&w.receiver, &relabelled).unwrap_err(), ShareRejection::DigestMismatch);
    }

    #[test]
    fn share_record_goes_through_upload_pathway() {
        let mut w = world();
        let tx = ShareTransaction {
            sender: w.owner.public,
            receiver: w.receiver.public,
            payload_digest: w.digest,
            tick: 700,
        };
        let env = record_share(&tx, &w.owner, &w.recorder.public, &mut w.rng).unwrap();
        let acc = receive_upload(&w.recorder, &env, &w.perms, &mut w.rng).unwrap();
        assert!(matches!(acc.record.metadata.kind, RecordKind::ShareTransaction { .. }));
        assert!(crate::record_protocol::share_record_consistent(&acc.record, &w.chain));
        w.chain
            .append(Block::seal(&w.recorder, w.chain.tip_digest(), 1200, vec![acc.record]))
            .unwrap();
        let lineage = w.chain.trace(&TraceQuery::Digest(w.digest));
        assert_eq!(lineage.len(), 2);
        assert_eq!(lineage[0].record.metadata.kind, RecordKind::GridData);

        assert!(record_share(&tx, &w.receiver, &w.recorder.public, &mut w.rng).is_err());
    }
}
