//! Cryptographic primitives used by every protocol message.
//!
//! Public-key encryption is X25519 + HKDF-SHA256 + ChaCha20-Poly1305. The
//! plaintext is length-framed and zero-padded up to a size bucket before
//! sealing, so a ciphertext's length only reveals which bucket the message
//! fell into. Sensor data is sealed with XChaCha20-Poly1305 under a
//! per-trade symmetric key, and certificates are signed with Ed25519.
//!
//! Randomness is always passed in explicitly; nothing here touches a global
//! RNG, so a seeded run is reproducible bit for bit.

use std::fmt;

use chacha20poly1305::aead::{Aead, KeyInit, Payload};
use chacha20poly1305::{ChaCha20Poly1305, XChaCha20Poly1305, XNonce};
use ed25519_dalek::{Signer, Verifier};
use hkdf::Hkdf;
use rand::{CryptoRng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::Sha256;
use thiserror::Error;

/// Width of a protocol nonce (`ID_s`, `ID_b`, certificate nonces).
pub const NONCE_LEN: usize = 16;
/// Width of X25519 keys and symmetric keys.
pub const KEY_LEN: usize = 32;
const TAG_LEN: usize = 16;
const FRAME_PREFIX: usize = 4;
const SYM_NONCE_LEN: usize = 24;

/// Bytes a hybrid ciphertext adds on top of the message: ephemeral public
/// key, AEAD tag and the 4-byte length frame.
pub const HYBRID_OVERHEAD: usize = KEY_LEN + TAG_LEN + FRAME_PREFIX;

/// Bytes a symmetric ciphertext adds on top of the message.
pub const SYM_OVERHEAD: usize = SYM_NONCE_LEN + TAG_LEN;

const HYBRID_INFO: &[u8] = b"datamarket/hybrid/v1";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CryptoError {
    #[error("message of {len} bytes exceeds the largest padding bucket (capacity {capacity})")]
    MessageTooLarge { len: usize, capacity: usize },
    #[error("decryption failed")]
    DecryptFailure,
    #[error("invalid padding buckets: {0}")]
    InvalidBuckets(String),
}

macro_rules! hex_bytes_newtype {
    ($name:ident, $len:expr) => {
        impl $name {
            pub fn as_bytes(&self) -> &[u8; $len] {
                &self.0
            }

            pub fn to_hex(&self) -> String {
                hex::encode(self.0)
            }

            pub fn from_hex(s: &str) -> Result<Self, hex::FromHexError> {
                let mut out = [0u8; $len];
                hex::decode_to_slice(s, &mut out)?;
                Ok(Self(out))
            }
        }

        impl fmt::Debug for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}({}..)", stringify!($name), &self.to_hex()[..8])
            }
        }

        impl Serialize for $name {
            fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
                if s.is_human_readable() {
                    s.serialize_str(&self.to_hex())
                } else {
                    s.serialize_bytes(&self.0)
                }
            }
        }

        impl<'de> Deserialize<'de> for $name {
            fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
                use serde::de::Error as _;
                if d.is_human_readable() {
                    let s = String::deserialize(d)?;
                    Self::from_hex(&s).map_err(D::Error::custom)
                } else {
                    let bytes: Vec<u8> = serde::Deserialize::deserialize(d)?;
                    let arr: [u8; $len] = bytes
                        .try_into()
                        .map_err(|_| D::Error::custom(concat!("expected ", stringify!($len), " bytes")))?;
                    Ok(Self(arr))
                }
            }
        }
    };
}

/// X25519 public key.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PublicKey(pub [u8; KEY_LEN]);
hex_bytes_newtype!(PublicKey, KEY_LEN);

/// X25519 secret key. Never serialized, never printed.
#[derive(Clone)]
pub struct SecretKey([u8; KEY_LEN]);

impl SecretKey {
    pub fn public_key(&self) -> PublicKey {
        let secret = x25519_dalek::StaticSecret::from(self.0);
        PublicKey(x25519_dalek::PublicKey::from(&secret).to_bytes())
    }
}

impl fmt::Debug for SecretKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("SecretKey(..)")
    }
}

/// An encryption key pair: houses the per-trade buyer and seller keys as
/// well as the broker-chain key.
#[derive(Clone, Debug)]
pub struct KeyPair {
    pub public: PublicKey,
    secret: SecretKey,
}

impl KeyPair {
    pub fn generate<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        let secret = x25519_dalek::StaticSecret::random_from_rng(rng);
        let public = x25519_dalek::PublicKey::from(&secret);
        KeyPair {
            public: PublicKey(public.to_bytes()),
            secret: SecretKey(secret.to_bytes()),
        }
    }

    /// Deterministic key pair for well-known keys declared by seed in a
    /// scenario (the broker-chain key, for instance).
    pub fn from_seed(seed: u64) -> Self {
        Self::generate(&mut ChaCha20Rng::seed_from_u64(seed))
    }

    pub fn secret(&self) -> &SecretKey {
        &self.secret
    }
}

/// Generates a fresh encryption key pair from the given RNG state.
pub fn keygen<R: RngCore + CryptoRng>(rng: &mut R) -> KeyPair {
    KeyPair::generate(rng)
}

/// 16-byte random nonce.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Nonce(pub [u8; NONCE_LEN]);
hex_bytes_newtype!(Nonce, NONCE_LEN);

impl Nonce {
    pub fn random<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        let mut n = [0u8; NONCE_LEN];
        rng.fill_bytes(&mut n);
        Nonce(n)
    }
}

/// 32-byte key for sealing sensor data.
#[derive(Clone, PartialEq, Eq)]
pub struct SymmetricKey(pub [u8; KEY_LEN]);
hex_bytes_newtype!(SymmetricKey, KEY_LEN);

impl SymmetricKey {
    pub fn random<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        let mut k = [0u8; KEY_LEN];
        rng.fill_bytes(&mut k);
        SymmetricKey(k)
    }
}

/// Size-bucket policy for hybrid ciphertexts.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Padding {
    /// No padding: ciphertext length is message length plus overhead.
    Off,
    /// Ciphertexts are exactly one of these lengths (ascending).
    Buckets(Vec<usize>),
}

impl Default for Padding {
    fn default() -> Self {
        Padding::Buckets(vec![256, 1024, 4096, 64 * 1024])
    }
}

impl Padding {
    /// Validated bucket set; sorts and rejects buckets that cannot hold
    /// even an empty message.
    pub fn buckets(mut sizes: Vec<usize>) -> Result<Self, CryptoError> {
        if sizes.is_empty() {
            return Err(CryptoError::InvalidBuckets("empty bucket set".into()));
        }
        sizes.sort_unstable();
        sizes.dedup();
        if sizes[0] < HYBRID_OVERHEAD {
            return Err(CryptoError::InvalidBuckets(format!(
                "bucket {} is smaller than the {HYBRID_OVERHEAD}-byte overhead",
                sizes[0]
            )));
        }
        if sizes[sizes.len() - 1] > u32::MAX as usize {
            return Err(CryptoError::InvalidBuckets("bucket exceeds 4 GiB".into()));
        }
        Ok(Padding::Buckets(sizes))
    }

    pub fn is_enabled(&self) -> bool {
        matches!(self, Padding::Buckets(_))
    }

    /// Largest message that can be sealed, if bounded.
    pub fn capacity(&self) -> Option<usize> {
        match self {
            Padding::Off => None,
            Padding::Buckets(b) => b.last().map(|&max| max - HYBRID_OVERHEAD),
        }
    }

    /// Whether a ciphertext length is admissible under this policy.
    pub fn admits(&self, ciphertext_len: usize) -> bool {
        match self {
            Padding::Off => ciphertext_len >= HYBRID_OVERHEAD,
            Padding::Buckets(b) => b.contains(&ciphertext_len),
        }
    }

    /// Total ciphertext length for a message of `msg_len` bytes.
    pub fn ciphertext_len(&self, msg_len: usize) -> Result<usize, CryptoError> {
        let needed = msg_len + HYBRID_OVERHEAD;
        match self {
            Padding::Off => Ok(needed),
            Padding::Buckets(b) => b.iter().copied().find(|&size| size >= needed).ok_or(
                CryptoError::MessageTooLarge {
                    len: msg_len,
                    capacity: self.capacity().unwrap_or(0),
                },
            ),
        }
    }
}

/// Opaque hybrid ciphertext. `padded_len()` is the only thing it reveals.
#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ciphertext {
    blob: Vec<u8>,
}

impl Ciphertext {
    pub fn from_bytes(blob: Vec<u8>) -> Self {
        Ciphertext { blob }
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.blob
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.blob
    }

    pub fn padded_len(&self) -> usize {
        self.blob.len()
    }
}

impl fmt::Debug for Ciphertext {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Ciphertext({} bytes)", self.blob.len())
    }
}

fn derive_key(shared: &[u8; 32], ephemeral: &[u8; 32], recipient: &[u8; 32]) -> [u8; 32] {
    let mut salt = [0u8; 64];
    salt[..32].copy_from_slice(ephemeral);
    salt[32..].copy_from_slice(recipient);
    let hk = Hkdf::<Sha256>::new(Some(&salt), shared);
    let mut okm = [0u8; 32];
    hk.expand(HYBRID_INFO, &mut okm)
        .expect("32 bytes is a valid HKDF-SHA256 output length");
    okm
}

/// Seals `m` to `pk`, padding the ciphertext up to the smallest bucket that
/// fits. Two calls on the same input give different blobs of equal length.
pub fn hybrid_encrypt<R: RngCore + CryptoRng>(
    pk: &PublicKey,
    m: &[u8],
    padding: &Padding,
    rng: &mut R,
) -> Result<Ciphertext, CryptoError> {
    let total = padding.ciphertext_len(m.len())?;
    let frame_len = total - KEY_LEN - TAG_LEN;
    let mut frame = Vec::with_capacity(frame_len);
    frame.extend_from_slice(&(m.len() as u32).to_be_bytes());
    frame.extend_from_slice(m);
    frame.resize(frame_len, 0);

    let ephemeral = x25519_dalek::StaticSecret::random_from_rng(rng);
    let ephemeral_pub = x25519_dalek::PublicKey::from(&ephemeral).to_bytes();
    let shared = ephemeral.diffie_hellman(&x25519_dalek::PublicKey::from(pk.0));
    let key = derive_key(shared.as_bytes(), &ephemeral_pub, &pk.0);

    // The key is single-use, so a zero nonce is safe.
    let cipher = ChaCha20Poly1305::new(&key.into());
    let sealed = cipher
        .encrypt(
            &[0u8; 12].into(),
            Payload {
                msg: &frame,
                aad: &ephemeral_pub,
            },
        )
        .expect("in-memory AEAD encryption does not fail");

    let mut blob = Vec::with_capacity(total);
    blob.extend_from_slice(&ephemeral_pub);
    blob.extend_from_slice(&sealed);
    debug_assert_eq!(blob.len(), total);
    Ok(Ciphertext { blob })
}

/// Opens a hybrid ciphertext and strips the padding.
pub fn hybrid_decrypt(sk: &SecretKey, c: &Ciphertext) -> Result<Vec<u8>, CryptoError> {
    if c.blob.len() < HYBRID_OVERHEAD {
        return Err(CryptoError::DecryptFailure);
    }
    let (eph, sealed) = c.blob.split_at(KEY_LEN);
    let eph: [u8; 32] = eph.try_into().expect("split at KEY_LEN");
    let secret = x25519_dalek::StaticSecret::from(sk.0);
    let recipient = x25519_dalek::PublicKey::from(&secret).to_bytes();
    let shared = secret.diffie_hellman(&x25519_dalek::PublicKey::from(eph));
    if !shared.was_contributory() {
        return Err(CryptoError::DecryptFailure);
    }
    let key = derive_key(shared.as_bytes(), &eph, &recipient);
    let cipher = ChaCha20Poly1305::new(&key.into());
    let frame = cipher
        .decrypt(
            &[0u8; 12].into(),
            Payload {
                msg: sealed,
                aad: &eph,
            },
        )
        .map_err(|_| CryptoError::DecryptFailure)?;

    let len = u32::from_be_bytes(frame[..FRAME_PREFIX].try_into().expect("frame prefix")) as usize;
    let body = &frame[FRAME_PREFIX..];
    if len > body.len() || body[len..].iter().any(|&b| b != 0) {
        return Err(CryptoError::DecryptFailure);
    }
    Ok(body[..len].to_vec())
}

/// Authenticated symmetric encryption; output is `nonce || ciphertext || tag`.
pub fn sym_encrypt<R: RngCore + CryptoRng>(k: &SymmetricKey, m: &[u8], rng: &mut R) -> Vec<u8> {
    let mut nonce = [0u8; SYM_NONCE_LEN];
    rng.fill_bytes(&mut nonce);
    let cipher = XChaCha20Poly1305::new(&k.0.into());
    let sealed = cipher
        .encrypt(XNonce::from_slice(&nonce), m)
        .expect("in-memory AEAD encryption does not fail");
    let mut out = Vec::with_capacity(SYM_NONCE_LEN + sealed.len());
    out.extend_from_slice(&nonce);
    out.extend_from_slice(&sealed);
    out
}

pub fn sym_decrypt(k: &SymmetricKey, c: &[u8]) -> Result<Vec<u8>, CryptoError> {
    if c.len() < SYM_OVERHEAD {
        return Err(CryptoError::DecryptFailure);
    }
    let (nonce, sealed) = c.split_at(SYM_NONCE_LEN);
    XChaCha20Poly1305::new(&k.0.into())
        .decrypt(XNonce::from_slice(nonce), sealed)
        .map_err(|_| CryptoError::DecryptFailure)
}

/// Ed25519 verifying key of a certificate issuer.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VerifyingKey(pub [u8; 32]);
hex_bytes_newtype!(VerifyingKey, 32);

/// Ed25519 signature.
#[derive(Clone, Copy, PartialEq, Eq)]
pub struct Signature(pub [u8; 64]);
hex_bytes_newtype!(Signature, 64);

/// Ed25519 signing key.
#[derive(Clone)]
pub struct SigningKey(ed25519_dalek::SigningKey);

impl SigningKey {
    pub fn generate<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        SigningKey(ed25519_dalek::SigningKey::generate(rng))
    }

    pub fn from_seed(seed: u64) -> Self {
        Self::generate(&mut ChaCha20Rng::seed_from_u64(seed))
    }

    pub fn verifying_key(&self) -> VerifyingKey {
        VerifyingKey(self.0.verifying_key().to_bytes())
    }
}

impl fmt::Debug for SigningKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SigningKey({:?})", self.verifying_key())
    }
}

pub fn sign(sk: &SigningKey, m: &[u8]) -> Signature {
    Signature(sk.0.sign(m).to_bytes())
}

/// Never panics: malformed keys or signatures simply fail verification.
pub fn verify(pk: &VerifyingKey, m: &[u8], sig: &Signature) -> bool {
    let Ok(key) = ed25519_dalek::VerifyingKey::from_bytes(&pk.0) else {
        return false;
    };
    let sig = ed25519_dalek::Signature::from_bytes(&sig.0);
    key.verify(m, &sig).is_ok()
}
