//! Counter-based random streams.
//!
//! Every stochastic quantity is drawn from a ChaCha stream addressed by
//! `(seed, stream index)`, so results depend only on the seed and never on
//! the number of worker threads or on scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Items per work unit in parallel reductions. Fixed so that the
/// summation order does not depend on the thread count.
pub(crate) const REDUCTION_CHUNK: usize = 16;

pub(crate) fn stream(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Mixes a tag and counter into `seed` (splitmix64 finaliser) to obtain an
/// independent seed for a sub-task.
pub(crate) fn derive_seed(seed: u64, tag: u64, counter: u64) -> u64 {
    let mut z = seed
        ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ counter.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
