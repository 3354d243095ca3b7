//! Keys, signatures, digests and digital envelopes.
//!
//! Every primitive used by the ledger is pinned here:
//!
//! * digest: SHA-256
//! * signatures: Ed25519 (RFC 8032)
//! * envelope: X25519 ephemeral key agreement, HKDF-SHA256 key wrapping and
//!   ChaCha20-Poly1305 for both the wrapped session key and the payload.
//!
//! A node identity is a single 32-byte seed. Both the Ed25519 signing key and
//! the X25519 sealing key are derived from it, and the public half of each is
//! concatenated into one 64-byte [`PublicKey`].

use std::fmt;

use chacha20poly1305::aead::{Aead, KeyInit, Payload};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce};
use ed25519_dalek::{Signer, SigningKey, VerifyingKey};
use hkdf::Hkdf;
use rand::{CryptoRng, RngCore};
use sha2::{Digest as _, Sha256};
use thiserror::Error;
use x25519_dalek::{PublicKey as XPublicKey, StaticSecret};

pub const DIGEST_LEN: usize = 32;
pub const SEED_LEN: usize = 32;
pub const PUBLIC_KEY_LEN: usize = 64;
pub const SIGNATURE_LEN: usize = 64;
pub const NONCE_LEN: usize = 12;

const SESSION_KEY_LEN: usize = 32;
const TAG_LEN: usize = 16;
/// Ephemeral X25519 public key followed by the AEAD-sealed session key.
pub const ENCRYPTED_KEY_LEN: usize = 32 + SESSION_KEY_LEN + TAG_LEN;

const SEALING_KEY_LABEL: &[u8] = b"gridledger/x25519-sealing-key/v1";
const KEK_INFO: &[u8] = b"gridledger/envelope-kek/v1";
const SIGN_LABEL: &[u8] = b"gridledger/sig/v1";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CryptoError {
    #[error("seed must be {SEED_LEN} bytes, got {0}")]
    SeedLength(usize),
    #[error("expected {expected} bytes, got {actual}")]
    Length { expected: usize, actual: usize },
    #[error("invalid hex: {0}")]
    Hex(String),
    #[error("decryption failed")]
    DecryptionFailed,
    #[error("malformed envelope: {0}")]
    MalformedEnvelope(&'static str),
}

fn fixed<const N: usize>(bytes: &[u8]) -> Result<[u8; N], CryptoError> {
    bytes.try_into().map_err(|_| CryptoError::Length {
        expected: N,
        actual: bytes.len(),
    })
}

fn from_hex_fixed<const N: usize>(s: &str) -> Result<[u8; N], CryptoError> {
    let raw = hex::decode(s.trim()).map_err(|e| CryptoError::Hex(e.to_string()))?;
    fixed(&raw)
}

/// SHA-256 output.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Digest([u8; DIGEST_LEN]);

impl Digest {
    /// The all-zero digest, used as the genesis back-link.
    pub const ZERO: Digest = Digest([0u8; DIGEST_LEN]);

    pub const fn from_array(bytes: [u8; DIGEST_LEN]) -> Self {
        Digest(bytes)
    }

    pub fn from_slice(bytes: &[u8]) -> Result<Self, CryptoError> {
        fixed(bytes).map(Digest)
    }

    pub fn from_hex(s: &str) -> Result<Self, CryptoError> {
        from_hex_fixed(s).map(Digest)
    }

    pub fn as_bytes(&self) -> &[u8; DIGEST_LEN] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({})", &self.to_hex()[..16])
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

pub fn digest(data: &[u8]) -> Digest {
    Digest(Sha256::digest(data).into())
}

/// Digest over the concatenation of several byte strings.
pub fn digest_parts(parts: &[&[u8]]) -> Digest {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p);
    }
    Digest(h.finalize().into())
}

/// Ed25519 verifying key followed by X25519 public key.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PublicKey([u8; PUBLIC_KEY_LEN]);

impl PublicKey {
    pub fn from_slice(bytes: &[u8]) -> Result<Self, CryptoError> {
        fixed(bytes).map(PublicKey)
    }

    pub fn from_hex(s: &str) -> Result<Self, CryptoError> {
        from_hex_fixed(s).map(PublicKey)
    }

    pub fn as_bytes(&self) -> &[u8; PUBLIC_KEY_LEN] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    /// Short prefix for logs and tables.
    pub fn short(&self) -> String {
        hex::encode(&self.0[..6])
    }

    fn signing_half(&self) -> [u8; 32] {
        self.0[..32].try_into().expect("fixed split")
    }

    fn sealing_half(&self) -> XPublicKey {
        let raw: [u8; 32] = self.0[32..].try_into().expect("fixed split");
        XPublicKey::from(raw)
    }
}

impl fmt::Debug for PublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PublicKey({})", self.short())
    }
}

impl fmt::Display for PublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

/// The 32-byte identity seed. Both secret keys are derived from it on use.
#[derive(Clone, PartialEq, Eq)]
pub struct PrivateKey([u8; SEED_LEN]);

impl PrivateKey {
    pub fn as_bytes(&self) -> &[u8; SEED_LEN] {
        &self.0
    }

    fn signing_key(&self) -> SigningKey {
        SigningKey::from_bytes(&self.0)
    }

    fn sealing_secret(&self) -> StaticSecret {
        StaticSecret::from(digest_parts(&[SEALING_KEY_LABEL, &self.0]).0)
    }
}

impl fmt::Debug for PrivateKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("PrivateKey(..)")
    }
}

#[derive(Clone, PartialEq, Eq)]
pub struct Keypair {
    pub public: PublicKey,
    pub private: PrivateKey,
}

impl fmt::Debug for Keypair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Keypair").field("public", &self.public).finish()
    }
}

impl Keypair {
    pub fn sign(&self, message: &[u8]) -> Signature {
        sign_bound(&self.private.signing_key(), &self.public, message)
    }

    pub fn decrypt(&self, envelope: &Envelope) -> Result<Vec<u8>, CryptoError> {
        decrypt(&self.private, envelope)
    }
}

/// Deterministically derive a keypair from 32 bytes of entropy.
pub fn generate_keypair(seed: &[u8]) -> Result<Keypair, CryptoError> {
    let seed: [u8; SEED_LEN] = seed
        .try_into()
        .map_err(|_| CryptoError::SeedLength(seed.len()))?;
    let private = PrivateKey(seed);
    let verifying = private.signing_key().verifying_key();
    let sealing = XPublicKey::from(&private.sealing_secret());
    let mut public = [0u8; PUBLIC_KEY_LEN];
    public[..32].copy_from_slice(verifying.as_bytes());
    public[32..].copy_from_slice(sealing.as_bytes());
    Ok(Keypair {
        public: PublicKey(public),
        private,
    })
}

#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Signature([u8; SIGNATURE_LEN]);

impl Signature {
    pub fn from_slice(bytes: &[u8]) -> Result<Self, CryptoError> {
        fixed(bytes).map(Signature)
    }

    pub fn from_hex(s: &str) -> Result<Self, CryptoError> {
        from_hex_fixed(s).map(Signature)
    }

    pub fn as_bytes(&self) -> &[u8; SIGNATURE_LEN] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl fmt::Debug for Signature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Signature({}..)", hex::encode(&self.0[..8]))
    }
}

// The signed message binds the full 64-byte public key, so the sealing half is
// covered by every signature too.
fn bound_message(public_key: &PublicKey, message: &[u8]) -> Vec<u8> {
    let mut m = Vec::with_capacity(SIGN_LABEL.len() + PUBLIC_KEY_LEN + message.len());
    m.extend_from_slice(SIGN_LABEL);
    m.extend_from_slice(&public_key.0);
    m.extend_from_slice(message);
    m
}

fn sign_bound(key: &SigningKey, public_key: &PublicKey, message: &[u8]) -> Signature {
    Signature(key.sign(&bound_message(public_key, message)).to_bytes())
}

pub fn sign(private_key: &PrivateKey, message: &[u8]) -> Signature {
    let public = generate_keypair(&private_key.0)
        .expect("private key is a valid seed")
        .public;
    sign_bound(&private_key.signing_key(), &public, message)
}

/// Strict Ed25519 verification. Malformed keys or signatures verify as false.
pub fn verify(public_key: &PublicKey, message: &[u8], signature: &Signature) -> bool {
    let Ok(vk) = VerifyingKey::from_bytes(&public_key.signing_half()) else {
        return false;
    };
    let sig = ed25519_dalek::Signature::from_bytes(&signature.0);
    vk.verify_strict(&bound_message(public_key, message), &sig)
        .is_ok()
}

/// Verification over raw byte strings of any length.
pub fn verify_bytes(public_key: &[u8], message: &[u8], signature: &[u8]) -> bool {
    match (PublicKey::from_slice(public_key), Signature::from_slice(signature)) {
        (Ok(pk), Ok(sig)) => verify(&pk, message, &sig),
        _ => false,
    }
}

/// A payload sealed to one recipient.
///
/// `encrypted_key` holds the sender's ephemeral X25519 public key followed by
/// the per-envelope session key, itself sealed under a key-encryption key
/// derived from the X25519 shared secret. The payload is sealed under the
/// session key with `encrypted_key` bound as associated data.
#[derive(Clone, PartialEq, Eq)]
pub struct Envelope {
    pub encrypted_key: Vec<u8>,
    pub ciphertext: Vec<u8>,
    pub nonce: [u8; NONCE_LEN],
}

impl fmt::Debug for Envelope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Envelope")
            .field("ciphertext_len", &self.ciphertext.len())
            .finish()
    }
}

impl Envelope {
    /// Length-prefixed wire form: `u32 len || encrypted_key || nonce || u32 len || ciphertext`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out =
            Vec::with_capacity(8 + self.encrypted_key.len() + NONCE_LEN + self.ciphertext.len());
        out.extend_from_slice(&(self.encrypted_key.len() as u32).to_be_bytes());
        out.extend_from_slice(&self.encrypted_key);
        out.extend_from_slice(&self.nonce);
        out.extend_from_slice(&(self.ciphertext.len() as u32).to_be_bytes());
        out.extend_from_slice(&self.ciphertext);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CryptoError> {
        fn take<'a>(buf: &mut &'a [u8], n: usize) -> Result<&'a [u8], CryptoError> {
            if buf.len() < n {
                return Err(CryptoError::MalformedEnvelope("truncated"));
            }
            let (head, tail) = buf.split_at(n);
            *buf = tail;
            Ok(head)
        }
        fn len(buf: &mut &[u8]) -> Result<usize, CryptoError> {
            let raw: [u8; 4] = take(buf, 4)?.try_into().expect("4 bytes");
            Ok(u32::from_be_bytes(raw) as usize)
        }
        let mut buf = bytes;
        let n = len(&mut buf)?;
        let encrypted_key = take(&mut buf, n)?.to_vec();
        let nonce: [u8; NONCE_LEN] = take(&mut buf, NONCE_LEN)?.try_into().expect("nonce");
        let n = len(&mut buf)?;
        let ciphertext = take(&mut buf, n)?.to_vec();
        if !buf.is_empty() {
            return Err(CryptoError::MalformedEnvelope("trailing bytes"));
        }
        let env = Envelope {
            encrypted_key,
            ciphertext,
            nonce,
        };
        env.check_shape()?;
        Ok(env)
    }

    fn check_shape(&self) -> Result<(), CryptoError> {
        if self.encrypted_key.len() != ENCRYPTED_KEY_LEN {
            return Err(CryptoError::MalformedEnvelope("encrypted key length"));
        }
        if self.ciphertext.len() < TAG_LEN {
            return Err(CryptoError::MalformedEnvelope("ciphertext shorter than tag"));
        }
        Ok(())
    }
}

fn key_encryption_key(shared: &[u8; 32], ephemeral: &[u8; 32], recipient: &[u8; 32]) -> Key {
    let mut salt = [0u8; 64];
    salt[..32].copy_from_slice(ephemeral);
    salt[32..].copy_from_slice(recipient);
    let hk = Hkdf::<Sha256>::new(Some(&salt), shared);
    let mut kek = [0u8; 32];
    hk.expand(KEK_INFO, &mut kek).expect("32 bytes is a valid HKDF length");
    Key::from(kek)
}

/// Seal `plaintext` to `public_key`, drawing all randomness from `rng`.
pub fn encrypt_for_with_rng<R: RngCore + CryptoRng>(
    public_key: &PublicKey,
    plaintext: &[u8],
    rng: &mut R,
) -> Envelope {
    let mut eph_bytes = [0u8; 32];
    rng.fill_bytes(&mut eph_bytes);
    let ephemeral = StaticSecret::from(eph_bytes);
    let ephemeral_pub = XPublicKey::from(&ephemeral);
    let recipient = public_key.sealing_half();
    let shared = ephemeral.diffie_hellman(&recipient);
    let kek = key_encryption_key(shared.as_bytes(), ephemeral_pub.as_bytes(), recipient.as_bytes());

    let mut session_key = [0u8; SESSION_KEY_LEN];
    rng.fill_bytes(&mut session_key);
    // The KEK is unique per envelope, so a fixed nonce is safe for the key wrap.
    let wrapped = ChaCha20Poly1305::new(&kek)
        .encrypt(&Nonce::default(), session_key.as_slice())
        .expect("in-memory AEAD encryption");

    let mut encrypted_key = Vec::with_capacity(ENCRYPTED_KEY_LEN);
    encrypted_key.extend_from_slice(ephemeral_pub.as_bytes());
    encrypted_key.extend_from_slice(&wrapped);

    let mut nonce = [0u8; NONCE_LEN];
    rng.fill_bytes(&mut nonce);
    let ciphertext = ChaCha20Poly1305::new(&Key::from(session_key))
        .encrypt(
            Nonce::from_slice(&nonce),
            Payload {
                msg: plaintext,
                aad: &encrypted_key,
            },
        )
        .expect("in-memory AEAD encryption");

    Envelope {
        encrypted_key,
        ciphertext,
        nonce,
    }
}

/// Seal `plaintext` to `public_key` using operating-system randomness.
pub fn encrypt_for(public_key: &PublicKey, plaintext: &[u8]) -> Envelope {
    encrypt_for_with_rng(public_key, plaintext, &mut rand::rngs::OsRng)
}

pub fn decrypt(private_key: &PrivateKey, envelope: &Envelope) -> Result<Vec<u8>, CryptoError> {
    envelope.check_shape()?;
    let (eph_raw, wrapped) = envelope.encrypted_key.split_at(32);
    let ephemeral_pub = XPublicKey::from(<[u8; 32]>::try_from(eph_raw).expect("split at 32"));
    let secret = private_key.sealing_secret();
    let recipient = XPublicKey::from(&secret);
    let shared = secret.diffie_hellman(&ephemeral_pub);
    if !shared.was_contributory() {
        return Err(CryptoError::DecryptionFailed);
    }
    let kek = key_encryption_key(shared.as_bytes(), ephemeral_pub.as_bytes(), recipient.as_bytes());
    let session_key = ChaCha20Poly1305::new(&kek)
        .decrypt(&Nonce::default(), wrapped)
        .map_err(|_| CryptoError::DecryptionFailed)?;
    let session_key: [u8; SESSION_KEY_LEN] = session_key
        .try_into()
        .map_err(|_| CryptoError::DecryptionFailed)?;
    ChaCha20Poly1305::new(&Key::from(session_key))
        .decrypt(
            Nonce::from_slice(&envelope.nonce),
            Payload {
                msg: &envelope.ciphertext,
                aad: &envelope.encrypted_key,
            },
        )
        .map_err(|_| CryptoError::DecryptionFailed)
}
