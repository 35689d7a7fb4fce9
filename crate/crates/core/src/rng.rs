//! Seed derivation. A single experiment seed fans out into independent
//! ChaCha streams per subsystem so that changing one knob (say, the
//! augmentation level) leaves the other streams untouched.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Subsystems that draw randomness.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stream {
    Data = 1,
    Init = 2,
    Augment = 3,
    Sampler = 4,
    Dropout = 5,
    Episode = 6,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Hierarchical seed: `SeedTree::new(seed).child(k)` is a pure function of
/// `(seed, k)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeedTree(u64);

impl SeedTree {
    pub fn new(seed: u64) -> Self {
        SeedTree(splitmix64(seed))
    }

    pub fn child(self, key: u64) -> Self {
        SeedTree(splitmix64(self.0 ^ splitmix64(key.wrapping_add(0x632B_E59B_D9B4_E019))))
    }

    pub fn value(self) -> u64 {
        self.0
    }

    /// Generator for `stream`, keyed on the ChaCha stream id.
    pub fn rng(self, stream: Stream) -> Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.0);
        rng.set_stream(stream as u64);
        rng
    }
}
