//! Named random streams derived from a single run seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type StreamRng = ChaCha8Rng;

/// Derives independent, reproducible generators from one seed by name.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeedSplitter {
    seed: u64,
}

impl SeedSplitter {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self, name: &str) -> StreamRng {
        let digest = Sha256::digest(name.as_bytes());
        let mut word = [0u8; 8];
        word.copy_from_slice(&digest[..8]);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(u64::from_le_bytes(word));
        rng
    }
}
