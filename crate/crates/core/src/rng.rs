//! Named random streams derived from one root seed.
//!
//! Every consumer asks for a stream by name. Each name maps to its own
//! ChaCha stream id under the shared root key, so adding a new consumer
//! never shifts the numbers another consumer sees.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

pub type StreamRng = ChaCha20Rng;

pub const PRETRAIN_DATA: &str = "pretrain-data";
pub const DOWNSTREAM_DATA: &str = "downstream-data";
pub const DOWNSTREAM_TEST: &str = "downstream-test";
pub const DOWNSTREAM_V_STAR: &str = "downstream-v-star";
pub const V_STAR: &str = "v-star";
pub const EVAL: &str = "eval";
pub const SHUFFLE: &str = "shuffle";
pub const GRADCHECK: &str = "gradcheck";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedTree {
    root: u64,
}

impl SeedTree {
    pub fn new(root: u64) -> Self {
        Self { root }
    }

    pub fn root(&self) -> u64 {
        self.root
    }

    pub fn stream(&self, name: &str) -> StreamRng {
        let mut rng = ChaCha20Rng::seed_from_u64(self.root);
        rng.set_stream(stream_id(name));
        rng
    }

    /// Stream for the `index`-th repetition of a named consumer.
    pub fn indexed_stream(&self, name: &str, index: u64) -> StreamRng {
        let mut rng = ChaCha20Rng::seed_from_u64(self.root);
        rng.set_stream(stream_id(name) ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        rng
    }
}

// FNV-1a, 64 bit.
fn stream_id(name: &str) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for byte in name.bytes() {
        hash ^= u64::from(byte);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}
