use serde::Serialize;
use sha2::{Digest, Sha256};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// SHA-256 of the compact JSON encoding of `value`.
pub fn hash_json<T: Serialize + ?Sized>(value: &T) -> String {
    sha256_hex(&serde_json::to_vec(value).expect("serializable"))
}

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

/// Stable per-item seed derived from a base seed and a label.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    fnv1a(label.as_bytes()) ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
}
