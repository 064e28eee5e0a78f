use serde::Serialize;
use sha2::{Digest, Sha256};

pub fn sha256_hex(bytes: impl AsRef<[u8]>) -> String {
    hex::encode(Sha256::digest(bytes.as_ref()))
}

/// Stable digest of a rendered prompt; the characteristic cache key.
pub fn prompt_hash(prompt: &str) -> String {
    sha256_hex(prompt.as_bytes())
}

/// Digest over the JSONL serialization of `items`.
pub fn jsonl_digest<T: Serialize>(items: &[T]) -> String {
    let mut hasher = Sha256::new();
    for item in items {
        hasher.update(serde_json::to_vec(item).expect("serializable"));
        hasher.update(b"\n");
    }
    hex::encode(hasher.finalize())
}

/// FNV-1a, used for feature hashing where a fixed, dependency-free hash is
/// needed across platforms and releases.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}
