//! Counter-based random streams.
//!
//! Every random draw in a run is taken from a stream keyed by the run seed
//! and a tuple of counters (purpose, step, item, ...). Nothing carries
//! generator state between steps, so a run can be resumed from the step
//! counter alone and per-item work can be spread across threads without
//! changing the result.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const INIT: u64 = 0x1;
pub const AUGMENT: u64 = 0x2;
pub const DROPOUT_STUDENT: u64 = 0x3;
pub const DROPOUT_TEACHER: u64 = 0x4;
pub const SHUFFLE_LABELED: u64 = 0x5;
pub const SHUFFLE_UNLABELED: u64 = 0x6;
pub const SPLIT: u64 = 0x7;
pub const SYNTH: u64 = 0x8;

#[inline]
fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Hash a seed and a list of counters into a single 64-bit key.
pub fn derive(seed: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(splitmix(seed), |acc, &t| splitmix(acc ^ splitmix(t)))
}

pub fn stream(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, tags))
}
