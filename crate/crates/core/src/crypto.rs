//! Ed25519 signatures and hybrid public-key sealing.
//!
//! Keys are derived deterministically from a scenario seed and the owner's
//! [`NodeId`], so one seed reproduces every key in a run. Sealing uses an
//! ephemeral X25519 exchange against the recipient's Ed25519 key (mapped to
//! Montgomery form) and ChaCha20-Poly1305.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use chacha20poly1305::aead::{Aead, KeyInit};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce};
use ed25519_dalek::{Signer, SigningKey, Verifier as _, VerifyingKey};
use rand::{CryptoRng, RngCore};
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha3::{Digest, Sha3_256};
use thiserror::Error;
use x25519_dalek::{PublicKey as XPublicKey, StaticSecret};

use crate::canonical_struct;
use crate::codec::Canonical;
use crate::primitives::NodeId;

pub type PublicKey = [u8; 32];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CryptoError {
    #[error("ciphertext does not open under this key")]
    DecryptionFailure,
    #[error("public key is not a valid curve point")]
    InvalidPublicKey,
}

#[derive(Clone)]
pub struct KeyPair {
    pub owner: NodeId,
    signing: SigningKey,
}

impl fmt::Debug for KeyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KeyPair")
            .field("owner", &self.owner)
            .field("public_key", &hex::encode(self.public_key()))
            .finish_non_exhaustive()
    }
}

impl KeyPair {
    pub fn public_key(&self) -> PublicKey {
        self.signing.verifying_key().to_bytes()
    }

    pub fn secret_key(&self) -> [u8; 32] {
        self.signing.to_bytes()
    }
}

/// Derives the key pair of `owner` from a 32-byte seed.
pub fn keygen(seed: &[u8; 32], owner: NodeId) -> KeyPair {
    let mut h = Sha3_256::new();
    h.update(b"hapschain/keygen/v1");
    h.update(seed);
    h.update(owner.canonical_bytes());
    let secret: [u8; 32] = h.finalize().into();
    KeyPair {
        owner,
        signing: SigningKey::from_bytes(&secret),
    }
}

#[derive(Clone, PartialEq, Eq)]
pub struct Signature {
    pub signer: NodeId,
    pub bytes: [u8; 64],
}

canonical_struct!(Signature { signer, bytes });

impl fmt::Debug for Signature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Sig({:?}:{}..)", self.signer, hex::encode(&self.bytes[..6]))
    }
}

#[derive(Serialize, Deserialize)]
struct SignatureRepr {
    signer: NodeId,
    bytes: String,
}

impl Serialize for Signature {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        SignatureRepr {
            signer: self.signer,
            bytes: hex::encode(self.bytes),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Signature {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let repr = SignatureRepr::deserialize(d)?;
        let raw = hex::decode(&repr.bytes).map_err(D::Error::custom)?;
        let bytes: [u8; 64] = raw
            .try_into()
            .map_err(|_| D::Error::custom("signature must be 64 bytes"))?;
        Ok(Signature {
            signer: repr.signer,
            bytes,
        })
    }
}

pub fn sign(message: &[u8], key: &KeyPair) -> Signature {
    Signature {
        signer: key.owner,
        bytes: key.signing.sign(message).to_bytes(),
    }
}

/// Malformed keys or signature bytes yield `false`.
pub fn verify(message: &[u8], sig: &Signature, public_key: &PublicKey) -> bool {
    let Ok(vk) = VerifyingKey::from_bytes(public_key) else {
        return false;
    };
    let sig = ed25519_dalek::Signature::from_bytes(&sig.bytes);
    vk.verify(message, &sig).is_ok()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ciphertext {
    pub ephemeral_public: [u8; 32],
    pub nonce: [u8; 12],
    pub body: Vec<u8>,
}

canonical_struct!(Ciphertext {
    ephemeral_public,
    nonce,
    body
});

fn session_key(shared: &[u8; 32], ephemeral: &[u8; 32], recipient: &[u8; 32]) -> Key {
    let mut h = Sha3_256::new();
    h.update(b"hapschain/seal/v1");
    h.update(shared);
    h.update(ephemeral);
    h.update(recipient);
    let k: [u8; 32] = h.finalize().into();
    Key::from(k)
}

fn montgomery(public_key: &PublicKey) -> Result<[u8; 32], CryptoError> {
    let vk = VerifyingKey::from_bytes(public_key).map_err(|_| CryptoError::InvalidPublicKey)?;
    Ok(vk.to_montgomery().to_bytes())
}

/// Encrypts `message` so that only the holder of `recipient_public_key` can open it.
pub fn seal<R: RngCore + CryptoRng>(
    message: &[u8],
    recipient_public_key: &PublicKey,
    rng: &mut R,
) -> Result<Ciphertext, CryptoError> {
    let recipient = montgomery(recipient_public_key)?;
    let ephemeral = StaticSecret::random_from_rng(&mut *rng);
    let ephemeral_public = XPublicKey::from(&ephemeral).to_bytes();
    let shared = ephemeral.diffie_hellman(&XPublicKey::from(recipient));
    let mut nonce = [0u8; 12];
    rng.fill_bytes(&mut nonce);
    let cipher = ChaCha20Poly1305::new(&session_key(
        shared.as_bytes(),
        &ephemeral_public,
        &recipient,
    ));
    let body = cipher
        .encrypt(Nonce::from_slice(&nonce), message)
        .expect("chacha20poly1305 encryption is infallible for in-memory buffers");
    Ok(Ciphertext {
        ephemeral_public,
        nonce,
        body,
    })
}

pub fn open(ct: &Ciphertext, recipient: &KeyPair) -> Result<Vec<u8>, CryptoError> {
    let secret = StaticSecret::from(recipient.signing.to_scalar_bytes());
    let own_public = XPublicKey::from(&secret).to_bytes();
    let shared = secret.diffie_hellman(&XPublicKey::from(ct.ephemeral_public));
    let cipher = ChaCha20Poly1305::new(&session_key(
        shared.as_bytes(),
        &ct.ephemeral_public,
        &own_public,
    ));
    cipher
        .decrypt(Nonce::from_slice(&ct.nonce), ct.body.as_slice())
        .map_err(|_| CryptoError::DecryptionFailure)
}

/// Static registry of every participant's public key, known to all nodes.
#[derive(Debug, Clone, Default)]
pub struct KeyRegistry {
    keys: BTreeMap<NodeId, PublicKey>,
}

impl KeyRegistry {
    pub fn insert(&mut self, owner: NodeId, key: PublicKey) {
        self.keys.insert(owner, key);
    }

    pub fn get(&self, owner: &NodeId) -> Option<&PublicKey> {
        self.keys.get(owner)
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    /// Verifies `sig` against the registered key of its signer.
    pub fn verify(&self, message: &[u8], sig: &Signature) -> bool {
        self.get(&sig.signer)
            .is_some_and(|pk| verify(message, sig, pk))
    }
}

/// Signature checks against a [`KeyRegistry`], memoised.
///
/// Verification is a pure function of (message, signature, key), so a
/// verdict computed once is reused wherever the same triple shows up again.
#[derive(Debug, Default)]
pub struct SignatureChecker {
    registry: KeyRegistry,
    memo: HashMap<[u8; 32], bool>,
    pub checks: u64,
    pub memo_hits: u64,
}

impl SignatureChecker {
    pub fn new(registry: KeyRegistry) -> Self {
        Self {
            registry,
            memo: HashMap::new(),
            checks: 0,
            memo_hits: 0,
        }
    }

    pub fn registry(&self) -> &KeyRegistry {
        &self.registry
    }

    pub fn check(&mut self, message: &[u8], sig: &Signature) -> bool {
        self.checks += 1;
        let Some(pk) = self.registry.get(&sig.signer) else {
            return false;
        };
        let mut h = Sha3_256::new();
        h.update(pk);
        h.update(sig.bytes);
        h.update(message);
        let key: [u8; 32] = h.finalize().into();
        if let Some(&v) = self.memo.get(&key) {
            self.memo_hits += 1;
            return v;
        }
        let v = verify(message, sig, pk);
        self.memo.insert(key, v);
        v
    }
}
