//! Seed derivation. Every random stream in the lab is a ChaCha8 generator
//! keyed by a base seed and a path of stream labels, so streams can be
//! re-created in any order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix(base), |acc, &p| splitmix(acc ^ splitmix(p)))
}

pub fn stream(base: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, path))
}

// Stream labels.
pub(crate) const INIT: u64 = 1;
pub(crate) const DATA: u64 = 2;
pub(crate) const GATES: u64 = 3;
pub(crate) const BATCHES: u64 = 4;
pub(crate) const PROBES: u64 = 5;
pub(crate) const TEACHER: u64 = 6;
