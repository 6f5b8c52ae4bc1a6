//! Per-stream seeds derived from one master seed.
//!
//! A stream seed is the first eight bytes (little endian) of
//! `SHA-256("winn-stream" ‖ master ‖ stream ‖ index)`, all integers encoded
//! as 8-byte little endian. Stream ids are fixed constants, so adding a new
//! stream never changes the seeds of existing ones.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Fixed stream identifiers.
pub mod stream {
    pub const PARAMS: u64 = 1;
    pub const CLASSIFY: u64 = 2;
    pub const SYNTHESIS: u64 = 3;
    pub const POOL: u64 = 4;
    pub const DATA: u64 = 5;
    pub const HELDOUT: u64 = 6;
    pub const ALT_INIT: u64 = 7;
    pub const TEXTURE: u64 = 8;
    pub const ATTACK: u64 = 9;
    pub const THEORY: u64 = 10;
}

pub fn derive_seed(master: u64, stream: u64, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(b"winn-stream");
    h.update(master.to_le_bytes());
    h.update(stream.to_le_bytes());
    h.update(index.to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

pub fn stream_rng(master: u64, stream: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, stream, index))
}
