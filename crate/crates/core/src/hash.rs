//! Content fingerprints used for cache keys and provenance.

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::tensor::Tensor;

pub fn bytes_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of the `f32` little-endian image of a tensor plus its shape.
pub fn tensor_hash(t: &Tensor) -> String {
    let mut h = Sha256::new();
    for d in t.shape() {
        h.update((*d as u64).to_le_bytes());
    }
    for v in t.data() {
        h.update((*v as f32).to_le_bytes());
    }
    hex::encode(h.finalize())
}

pub fn f32_hash(data: &[f32]) -> String {
    let mut h = Sha256::new();
    for v in data {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// Hash of the canonical JSON rendering of a value.
pub fn json_hash<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("serializable value");
    bytes_hash(&bytes)
}

/// First 16 hex digits, enough to disambiguate file names.
pub fn short(hash: &str) -> &str {
    &hash[..hash.len().min(16)]
}
