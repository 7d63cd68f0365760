//! Group keys: key derivation, announcement sealing and membership proofs.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use chacha20poly1305::aead::{Aead, KeyInit};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce};
use hmac::{Hmac, Mac};
use rand::RngCore;
use sha2::{Digest, Sha256};

pub const SECRET_LEN: usize = 32;
pub const NONCE_LEN: usize = 12;
pub const CHALLENGE_LEN: usize = 16;

type HmacSha256 = Hmac<Sha256>;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CryptoError {
    #[error("group secret must be 32 bytes, got {0}")]
    BadSecretLength(usize),
    #[error("decryption failed")]
    DecryptFailed,
    #[error("malformed key: {0}")]
    MalformedKey(String),
    #[error("unknown group `{0}`")]
    UnknownGroup(String),
    #[error("group `{0}` already exists")]
    DuplicateGroup(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl CryptoError {
    pub fn code(&self) -> &'static str {
        match self {
            CryptoError::BadSecretLength(_) => "BAD_SECRET_LENGTH",
            CryptoError::DecryptFailed => "DECRYPT_FAILED",
            CryptoError::MalformedKey(_) => "MALFORMED_KEY",
            CryptoError::UnknownGroup(_) => "UNKNOWN_GROUP",
            CryptoError::DuplicateGroup(_) => "DUPLICATE_GROUP",
            CryptoError::Io(_) => "IO",
        }
    }
}

#[derive(Clone, PartialEq, Eq)]
pub struct KeyMaterial {
    pub key_id: String,
    pub enc_key: [u8; 32],
    pub mac_key: [u8; 32],
}

impl fmt::Debug for KeyMaterial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KeyMaterial").field("key_id", &self.key_id).finish_non_exhaustive()
    }
}

fn sha256_parts(parts: &[&[u8]]) -> [u8; 32] {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p);
    }
    h.finalize().into()
}

pub fn derive_group_key_material(secret: &[u8]) -> Result<KeyMaterial, CryptoError> {
    if secret.len() != SECRET_LEN {
        return Err(CryptoError::BadSecretLength(secret.len()));
    }
    Ok(KeyMaterial {
        key_id: hex::encode(sha256_parts(&[secret]))[..16].to_owned(),
        enc_key: sha256_parts(&[secret, b"announce-enc"]),
        mac_key: sha256_parts(&[secret, b"exec-mac"]),
    })
}

/// Returns `nonce || ciphertext+tag`.
pub fn encrypt_announcement(payload: &[u8], enc_key: &[u8; 32]) -> Vec<u8> {
    let cipher = ChaCha20Poly1305::new(Key::from_slice(enc_key));
    let mut nonce = [0u8; NONCE_LEN];
    rand::thread_rng().fill_bytes(&mut nonce);
    let ct = cipher.encrypt(Nonce::from_slice(&nonce), payload).expect("in-memory encryption does not fail");
    let mut out = nonce.to_vec();
    out.extend_from_slice(&ct);
    out
}

pub fn decrypt_announcement(sealed: &[u8], enc_key: &[u8; 32]) -> Result<Vec<u8>, CryptoError> {
    if sealed.len() < NONCE_LEN {
        return Err(CryptoError::DecryptFailed);
    }
    let (nonce, ct) = sealed.split_at(NONCE_LEN);
    ChaCha20Poly1305::new(Key::from_slice(enc_key))
        .decrypt(Nonce::from_slice(nonce), ct)
        .map_err(|_| CryptoError::DecryptFailed)
}

pub fn membership_proof(mac_key: &[u8; 32], nonce: &[u8], request_digest: &[u8; 32]) -> [u8; 32] {
    let mut mac = <HmacSha256 as Mac>::new_from_slice(mac_key).expect("hmac takes any key length");
    mac.update(nonce);
    mac.update(request_digest);
    mac.finalize().into_bytes().into()
}

pub fn verify_proof(mac_key: &[u8; 32], nonce: &[u8], request_digest: &[u8; 32], tag: &[u8]) -> bool {
    let mut mac = <HmacSha256 as Mac>::new_from_slice(mac_key).expect("hmac takes any key length");
    mac.update(nonce);
    mac.update(request_digest);
    mac.verify_slice(tag).is_ok()
}

/// Keyed slot for an announcement; lets a version update replace the old
/// entry without revealing the tool name to non-members.
pub fn announcement_slot(mac_key: Option<&[u8; 32]>, tool_name: &str) -> String {
    let mut mac = <HmacSha256 as Mac>::new_from_slice(mac_key.map_or(&b"public"[..], |k| &k[..])).expect("any key length");
    mac.update(b"slot:");
    mac.update(tool_name.as_bytes());
    hex::encode(mac.finalize().into_bytes())[..32].to_owned()
}

pub fn random_bytes<const N: usize>() -> [u8; N] {
    let mut out = [0u8; N];
    rand::thread_rng().fill_bytes(&mut out);
    out
}

#[derive(Clone, PartialEq, Eq)]
pub struct GroupKey {
    pub name: String,
    secret: [u8; 32],
    material: KeyMaterial,
}

impl fmt::Debug for GroupKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "GroupKey({self})")
    }
}

impl fmt::Display for GroupKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.name, self.material.key_id)
    }
}

impl GroupKey {
    pub fn generate(name: impl Into<String>) -> Self {
        Self::from_secret(name, &random_bytes::<32>()).expect("32 bytes")
    }

    pub fn from_secret(name: impl Into<String>, secret: &[u8]) -> Result<Self, CryptoError> {
        let material = derive_group_key_material(secret)?;
        Ok(GroupKey { name: name.into(), secret: secret.try_into().expect("checked length"), material })
    }

    pub fn from_hex(name: impl Into<String>, text: &str) -> Result<Self, CryptoError> {
        let bytes = hex::decode(text.trim()).map_err(|e| CryptoError::MalformedKey(e.to_string()))?;
        Self::from_secret(name, &bytes)
    }

    pub fn secret_hex(&self) -> String {
        hex::encode(self.secret)
    }

    pub fn key_id(&self) -> &str {
        &self.material.key_id
    }

    pub fn material(&self) -> &KeyMaterial {
        &self.material
    }
}

/// Group keys held by a node, keyed by group name.
#[derive(Debug, Clone, Default)]
pub struct KeyRing {
    keys: BTreeMap<String, GroupKey>,
}

impl KeyRing {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, key: GroupKey) -> Option<GroupKey> {
        self.keys.insert(key.name.clone(), key)
    }

    pub fn remove(&mut self, name: &str) -> Option<GroupKey> {
        self.keys.remove(name)
    }

    pub fn get(&self, name: &str) -> Option<&GroupKey> {
        self.keys.get(name)
    }

    pub fn by_key_id(&self, key_id: &str) -> Option<&GroupKey> {
        self.keys.values().find(|k| k.key_id() == key_id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &GroupKey> {
        self.keys.values()
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    /// Loads `<dir>/<name>.key` files, each holding the hex secret.
    pub fn load_dir(dir: &Path) -> Result<Self, CryptoError> {
        let mut ring = KeyRing::new();
        let entries = match fs::read_dir(dir) {
            Ok(e) => e,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(ring),
            Err(e) => return Err(CryptoError::Io(e.to_string())),
        };
        for entry in entries {
            let path = entry.map_err(|e| CryptoError::Io(e.to_string()))?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("key") {
                continue;
            }
            let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_owned();
            let text = fs::read_to_string(&path).map_err(|e| CryptoError::Io(e.to_string()))?;
            let key = GroupKey::from_hex(name, &text)
                .map_err(|e| CryptoError::MalformedKey(format!("{}: {e}", path.display())))?;
            ring.insert(key);
        }
        Ok(ring)
    }

    pub fn key_path(dir: &Path, name: &str) -> PathBuf {
        dir.join(format!("{name}.key"))
    }

    pub fn save_key(dir: &Path, key: &GroupKey) -> Result<(), CryptoError> {
        fs::create_dir_all(dir).map_err(|e| CryptoError::Io(e.to_string()))?;
        fs::write(Self::key_path(dir, &key.name), format!("{}\n", key.secret_hex())).map_err(|e| CryptoError::Io(e.to_string()))
    }
}
