//! Simulation-faithful cryptographic envelope model.
//!
//! Public keys double as peer identifiers. Sealing to a public key, symmetric
//! encryption, match tags and signatures are modeled with SHA-256 and a
//! ChaCha20 keystream. The model is not meant to be cryptographically strong;
//! what it guarantees is information flow: no function in this module hands out
//! plaintext without the matching secret, and two seals of the same plaintext
//! never share wire bytes.
//!
//! The run-scoped [`Crypto`] registry plays the role of the trapdoor: sealing
//! and signature verification look the recipient up in the registry, which
//! never exposes the per-key material it holds.

use std::collections::HashMap;
use std::fmt;

use rand::{Rng, RngCore};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const ID_LEN: usize = 32;
pub const NONCE_LEN: usize = 16;
const GUARD: &[u8; 16] = b"anongoss-guard-1";
/// Wire overhead of an envelope: nonce, guard and the length word.
pub const ENVELOPE_OVERHEAD: usize = NONCE_LEN + GUARD.len() + 4;
/// Smallest size class an envelope is padded to.
pub const MIN_ENVELOPE: usize = 64;
pub const SIGNATURE_LEN: usize = ID_LEN + 32;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CryptoError {
    #[error("recipient {0} is not a registered public key")]
    UnknownRecipient(PeerId),
    #[error("envelope does not open with this key")]
    WrongKey,
    #[error("malformed ciphertext: {0}")]
    Malformed(&'static str),
    #[error("match tag collision between distinct (key, plaintext) pairs")]
    TagCollision,
}

pub type Result<T, E = CryptoError> = std::result::Result<T, E>;

fn digest(parts: &[&[u8]]) -> [u8; 32] {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p);
    }
    h.finalize().into()
}

/// Public key of a peer, which is also its logical identifier.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PeerId([u8; ID_LEN]);

impl PeerId {
    pub fn from_bytes(bytes: [u8; ID_LEN]) -> Self {
        Self(bytes)
    }

    pub fn as_bytes(&self) -> &[u8; ID_LEN] {
        &self.0
    }

    /// First eight bytes in hex, enough to tell peers apart in logs.
    pub fn short(&self) -> String {
        hex::encode(&self.0[..8])
    }
}

impl fmt::Debug for PeerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PeerId({})", self.short())
    }
}

impl fmt::Display for PeerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.short())
    }
}

/// Private half of a key pair. Opaque capability; never printed.
#[derive(Clone)]
pub struct SecretKey([u8; 32]);

impl SecretKey {
    pub fn public(&self) -> PeerId {
        PeerId(digest(&[b"anongoss/public", &self.0]))
    }

    fn model_key(&self) -> [u8; 32] {
        digest(&[b"anongoss/model-key", &self.0])
    }
}

impl fmt::Debug for SecretKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("SecretKey(..)")
    }
}

#[derive(Clone, Debug)]
pub struct KeyPair {
    pub public: PeerId,
    pub secret: SecretKey,
}

/// `E_i(m)`: a message sealed to one public key. Only the wire bytes exist;
/// the plaintext comes back only through [`open`].
#[derive(Clone, PartialEq, Eq)]
pub struct SealedEnvelope {
    bytes: Vec<u8>,
}

impl SealedEnvelope {
    pub fn from_wire(bytes: Vec<u8>) -> Self {
        Self { bytes }
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.bytes
    }

    pub fn len(&self) -> usize {
        self.bytes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }
}

impl fmt::Debug for SealedEnvelope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SealedEnvelope({} bytes)", self.bytes.len())
    }
}

/// `κ_i`: a symmetric key created by a peer.
#[derive(Clone, PartialEq, Eq)]
pub struct SymKey([u8; 32]);

impl SymKey {
    pub fn generate<R: RngCore + ?Sized>(rng: &mut R) -> Self {
        let mut k = [0u8; 32];
        rng.fill_bytes(&mut k);
        Self(k)
    }

    pub fn from_bytes(bytes: [u8; 32]) -> Self {
        Self(bytes)
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }
}

impl fmt::Debug for SymKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("SymKey(..)")
    }
}

/// `κ_i(m)`: a message under a symmetric key.
#[derive(Clone, PartialEq, Eq)]
pub struct SymCiphertext {
    bytes: Vec<u8>,
}

impl SymCiphertext {
    pub fn from_wire(bytes: Vec<u8>) -> Self {
        Self { bytes }
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn len(&self) -> usize {
        self.bytes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }
}

impl fmt::Debug for SymCiphertext {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SymCiphertext({} bytes)", self.bytes.len())
    }
}

/// Keyed deterministic digest of a plaintext, letting the key holder
/// recognize a message computed over that plaintext.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MatchTag([u8; 32]);

impl MatchTag {
    pub fn from_bytes(bytes: [u8; 32]) -> Self {
        Self(bytes)
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }
}

impl fmt::Debug for MatchTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "MatchTag({})", hex::encode(&self.0[..8]))
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
pub struct Signature {
    pub signer: PeerId,
    sig: [u8; 32],
}

impl Signature {
    pub fn to_bytes(&self) -> [u8; SIGNATURE_LEN] {
        let mut out = [0u8; SIGNATURE_LEN];
        out[..ID_LEN].copy_from_slice(self.signer.as_bytes());
        out[ID_LEN..].copy_from_slice(&self.sig);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() != SIGNATURE_LEN {
            return Err(CryptoError::Malformed("signature length"));
        }
        let mut signer = [0u8; ID_LEN];
        signer.copy_from_slice(&bytes[..ID_LEN]);
        let mut sig = [0u8; 32];
        sig.copy_from_slice(&bytes[ID_LEN..]);
        Ok(Self {
            signer: PeerId(signer),
            sig,
        })
    }
}

impl fmt::Debug for Signature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Signature(by {})", self.signer)
    }
}

/// Size class for a sealed message: the smallest power of two holding the
/// plaintext plus overhead, never below [`MIN_ENVELOPE`].
pub fn size_class(plaintext_len: usize) -> usize {
    (plaintext_len + ENVELOPE_OVERHEAD)
        .next_power_of_two()
        .max(MIN_ENVELOPE)
}

fn apply_keystream(domain: &[u8], key: &[u8; 32], nonce: &[u8], buf: &mut [u8]) {
    let seed = digest(&[domain, key, nonce]);
    let mut stream = ChaCha20Rng::from_seed(seed);
    let mut block = [0u8; 64];
    for chunk in buf.chunks_mut(64) {
        stream.fill_bytes(&mut block[..chunk.len()]);
        for (b, k) in chunk.iter_mut().zip(block.iter()) {
            *b ^= k;
        }
    }
}

fn encrypt<R: RngCore + ?Sized>(
    domain: &[u8],
    key: &[u8; 32],
    plaintext: &[u8],
    rng: &mut R,
) -> Vec<u8> {
    let total = size_class(plaintext.len());
    let mut out = vec![0u8; total];
    rng.fill_bytes(&mut out[..NONCE_LEN]);
    let (nonce, body) = out.split_at_mut(NONCE_LEN);
    body[..GUARD.len()].copy_from_slice(GUARD);
    body[GUARD.len()..GUARD.len() + 4].copy_from_slice(&(plaintext.len() as u32).to_le_bytes());
    body[GUARD.len() + 4..GUARD.len() + 4 + plaintext.len()].copy_from_slice(plaintext);
    apply_keystream(domain, key, nonce, body);
    out
}

fn decrypt(domain: &[u8], key: &[u8; 32], wire: &[u8]) -> Result<Vec<u8>> {
    if wire.len() < ENVELOPE_OVERHEAD {
        return Err(CryptoError::Malformed("shorter than envelope header"));
    }
    let (nonce, body) = wire.split_at(NONCE_LEN);
    let mut body = body.to_vec();
    apply_keystream(domain, key, nonce, &mut body);
    if &body[..GUARD.len()] != GUARD {
        return Err(CryptoError::WrongKey);
    }
    let mut len = [0u8; 4];
    len.copy_from_slice(&body[GUARD.len()..GUARD.len() + 4]);
    let len = u32::from_le_bytes(len) as usize;
    let start = GUARD.len() + 4;
    if len > body.len() - start {
        return Err(CryptoError::Malformed("length exceeds ciphertext"));
    }
    body.truncate(start + len);
    body.drain(..start);
    Ok(body)
}

const ENVELOPE_DOMAIN: &[u8] = b"anongoss/envelope";
const SYM_DOMAIN: &[u8] = b"anongoss/sym";

/// Opens an envelope with a secret key. Trailing bytes past the sealed length
/// are ignored, which lets relays re-pad fixed-size cells.
pub fn open(env: &SealedEnvelope, secret: &SecretKey) -> Result<Vec<u8>> {
    decrypt(ENVELOPE_DOMAIN, &secret.model_key(), &env.bytes)
}

pub fn sym_seal<R: RngCore + ?Sized>(key: &SymKey, plaintext: &[u8], rng: &mut R) -> SymCiphertext {
    SymCiphertext {
        bytes: encrypt(SYM_DOMAIN, &key.0, plaintext, rng),
    }
}

pub fn sym_open(ct: &SymCiphertext, key: &SymKey) -> Result<Vec<u8>> {
    decrypt(SYM_DOMAIN, &key.0, &ct.bytes)
}

/// XORs `buf` with a keystream bound to `key` and `label`. Applying it twice
/// restores the input.
pub fn stream_xor(key: &SymKey, label: &[u8], buf: &mut [u8]) {
    apply_keystream(b"anongoss/stream", &key.0, label, buf);
}

pub fn match_tag(key: &SymKey, plaintext: &[u8]) -> MatchTag {
    MatchTag(digest(&[b"anongoss/match-tag", &key.0, plaintext]))
}

pub fn sign(secret: &SecretKey, msg: &[u8]) -> Signature {
    Signature {
        signer: secret.public(),
        sig: digest(&[b"anongoss/sig", &secret.model_key(), msg]),
    }
}

/// Run-scoped key and tag registry. One per simulation; never shared.
#[derive(Default)]
pub struct Crypto {
    keys: HashMap<PeerId, [u8; 32]>,
    tags: HashMap<MatchTag, [u8; 32]>,
}

impl Crypto {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn keygen<R: Rng + ?Sized>(&mut self, rng: &mut R) -> KeyPair {
        loop {
            let mut s = [0u8; 32];
            rng.fill_bytes(&mut s);
            let secret = SecretKey(s);
            let public = secret.public();
            if let std::collections::hash_map::Entry::Vacant(e) = self.keys.entry(public) {
                e.insert(secret.model_key());
                return KeyPair { public, secret };
            }
        }
    }

    pub fn is_registered(&self, id: &PeerId) -> bool {
        self.keys.contains_key(id)
    }

    pub fn key_count(&self) -> usize {
        self.keys.len()
    }

    pub fn seal<R: RngCore + ?Sized>(
        &self,
        recipient: &PeerId,
        plaintext: &[u8],
        rng: &mut R,
    ) -> Result<SealedEnvelope> {
        let key = self
            .keys
            .get(recipient)
            .ok_or(CryptoError::UnknownRecipient(*recipient))?;
        Ok(SealedEnvelope {
            bytes: encrypt(ENVELOPE_DOMAIN, key, plaintext, rng),
        })
    }

    pub fn verify(&self, signer: &PeerId, msg: &[u8], sig: &Signature) -> bool {
        if sig.signer != *signer {
            return false;
        }
        match self.keys.get(signer) {
            Some(key) => digest(&[b"anongoss/sig", key, msg]) == sig.sig,
            None => false,
        }
    }

    /// Computes the match tag for `(key, plaintext)` and records it, failing
    /// if a different pair already produced the same tag in this run.
    pub fn register_tag(&mut self, key: &SymKey, plaintext: &[u8]) -> Result<MatchTag> {
        let tag = match_tag(key, plaintext);
        let fingerprint = digest(&[b"anongoss/tag-pair", &key.0, plaintext]);
        match self.tags.entry(tag) {
            std::collections::hash_map::Entry::Occupied(e) => {
                if *e.get() != fingerprint {
                    return Err(CryptoError::TagCollision);
                }
            }
            std::collections::hash_map::Entry::Vacant(e) => {
                e.insert(fingerprint);
            }
        }
        Ok(tag)
    }

    pub fn registered_tags(&self) -> usize {
        self.tags.len()
    }
}
