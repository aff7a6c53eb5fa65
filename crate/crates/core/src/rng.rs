//! Named, reproducible random substreams derived from one seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Splits a single 64-bit seed into independent named substreams.
///
/// The same `(seed, name, index)` always yields the same generator, and
/// different names never share a stream, so e.g. dataset generation and
/// weight initialisation cannot interfere.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Streams {
    seed: u64,
}

impl Streams {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self, name: &str) -> Rng {
        self.replica(name, 0)
    }

    /// Stream number `index` under `name`, e.g. one per Monte-Carlo replica.
    pub fn replica(&self, name: &str, index: u64) -> Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(fnv1a(name).wrapping_add(index.wrapping_mul(0x9E37_79B9_7F4A_7C15)));
        rng
    }
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}
