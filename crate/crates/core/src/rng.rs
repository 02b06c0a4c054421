//! Deterministic random streams.
//!
//! Every consumer derives its generator from `(seed, stream)`, so work split
//! across sequences or workers reproduces the serial run exactly.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

pub fn stream_rng(seed: u64, stream: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Stream ids reserved for the different consumers of one seed.
pub mod streams {
    pub const TEMPLATES: u64 = 0;
    /// Sequence `i` of a corpus uses `SEQUENCE_BASE + i`.
    pub const SEQUENCE_BASE: u64 = 1 << 32;
    pub const SPLIT: u64 = 1;
    pub const PQVAE_INIT: u64 = 2;
    pub const PQVAE_TRAIN: u64 = 3;
    pub const PREDICTOR_INIT: u64 = 4;
    pub const PREDICTOR_TRAIN: u64 = 5;
    pub const REFINER_INIT: u64 = 6;
    pub const REFINER_TRAIN: u64 = 7;
    pub const SAMPLING: u64 = 8;
    pub const VALIDATION: u64 = 9;
}
