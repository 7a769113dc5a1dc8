//! Seed splitting. Every random consumer derives its own stream from the
//! user seed and a name, so adding a consumer never perturbs another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedStream {
    seed: u64,
}

impl SeedStream {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Child stream keyed by `name`.
    pub fn derive(&self, name: &str) -> SeedStream {
        SeedStream {
            seed: mix(self.seed, name.as_bytes(), 0),
        }
    }

    /// Child stream keyed by a counter, e.g. an item index.
    pub fn at(&self, counter: u64) -> SeedStream {
        SeedStream {
            seed: mix(self.seed, b"#", counter),
        }
    }

    pub fn rng(&self) -> Rng {
        ChaCha8Rng::seed_from_u64(self.seed)
    }
}

fn mix(seed: u64, name: &[u8], counter: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((name.len() as u64).to_le_bytes());
    h.update(name);
    h.update(counter.to_le_bytes());
    let out = h.finalize();
    u64::from_le_bytes(out[..8].try_into().expect("sha256 is 32 bytes"))
}

/// Stable 64-bit hash of a string, used to key procedural content.
pub fn hash_str(s: &str) -> u64 {
    mix(0x5eed, s.as_bytes(), 0)
}
