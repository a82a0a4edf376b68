//! Keyed, splittable random streams.
//!
//! A [`StreamKey`] is a path of integers below a master seed. Every path maps
//! to an independent ChaCha20 keystream, so a draw depends only on its key and
//! never on the order in which other draws were made.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

/// Tags separating the independent streams consumed for a single task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u64)]
pub enum StreamTag {
    Covariance = 1,
    Theta = 2,
    Features = 3,
    Noise = 4,
    Rotation = 5,
    Adaptation = 6,
    MonteCarlo = 7,
}

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Hierarchical key identifying one random stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StreamKey {
    master: u64,
    state: u64,
}

impl StreamKey {
    pub fn new(master_seed: u64) -> Self {
        Self {
            master: master_seed,
            state: splitmix64(master_seed),
        }
    }

    pub fn master_seed(&self) -> u64 {
        self.master
    }

    /// Derive the child key for `index`. Children of distinct indices (and of
    /// distinct parents) are independent streams.
    pub fn child(&self, index: u64) -> Self {
        Self {
            master: self.master,
            state: splitmix64(self.state ^ splitmix64(index.wrapping_add(GOLDEN))),
        }
    }

    pub fn tagged(&self, tag: StreamTag) -> Self {
        self.child(0xA5A5_0000_0000_0000 | tag as u64)
    }

    /// Compact fingerprint of the key, stored alongside sampled data.
    pub fn fingerprint(&self) -> u64 {
        self.state
    }

    pub fn rng(&self) -> ChaCha20Rng {
        let mut seed = [0u8; 32];
        let mut s = self.state;
        for chunk in seed.chunks_exact_mut(8) {
            s = splitmix64(s);
            chunk.copy_from_slice(&s.to_le_bytes());
        }
        ChaCha20Rng::from_seed(seed)
    }
}
