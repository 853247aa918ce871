//! Seeded generators. Every random draw in the crate goes through ChaCha8 so runs
//! are bit-reproducible across platforms.

use rand::SeedableRng;
pub use rand_chacha::ChaCha8Rng as Rng64;

pub fn seeded(seed: u64) -> Rng64 {
    Rng64::seed_from_u64(seed)
}

/// Independent stream for one consumer of a run seed.
pub fn stream(seed: u64, stream: u64) -> Rng64 {
    let mut rng = Rng64::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub mod streams {
    pub const MODEL_INIT: u64 = 1;
    pub const PREDICTOR_INIT: u64 = 2;
    pub const SHUFFLE: u64 = 3;
    pub const TRAIN_DATA: u64 = 4;
    pub const EVAL_DATA: u64 = 5;
}
