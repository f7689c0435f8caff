//! Named random substreams and content hashing.
//!
//! Every random draw in a run derives from one run seed through a labelled
//! substream, so reordering unrelated work never changes a result.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};

pub fn substream_seed(seed: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    let digest = h.finalize();
    let mut b = [0u8; 8];
    b.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(b)
}

pub fn substream(seed: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(substream_seed(seed, label))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Short stable hash of any serializable configuration.
pub fn config_hash<C: Serialize + ?Sized>(cfg: &C) -> String {
    let json = serde_json::to_vec(cfg).expect("config serializes");
    sha256_hex(&json)[..16].to_string()
}
