//! Deterministic random streams.
//!
//! Every consumer of randomness asks for a stream keyed by `(purpose, epoch,
//! index)`. Streams are derived from the root seed alone, so switching one
//! feature on or off never shifts the numbers another feature sees, and a run
//! can be resumed from a checkpoint knowing only the seed and the epoch.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// What a stream is used for. The discriminant is mixed into the seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Purpose {
    Init = 1,
    Transition = 2,
    PolicySampling = 3,
    Resampling = 4,
    Shuffle = 5,
    Augment = 6,
    SplitTrain = 7,
    SplitMeasure = 8,
    Measurement = 9,
    ModelInit = 10,
    Data = 11,
    Synthetic = 12,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Streams {
    seed: u64,
}

impl Streams {
    pub fn new(seed: u64) -> Self {
        Streams { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self, purpose: Purpose, epoch: u64, index: u64) -> StreamRng {
        let mut h = splitmix64(self.seed ^ 0x5041_5547_4d45_4e54);
        h = splitmix64(h ^ purpose as u64);
        h = splitmix64(h ^ epoch);
        h = splitmix64(h ^ index);
        ChaCha8Rng::seed_from_u64(h)
    }
}

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
