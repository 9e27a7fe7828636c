//! Seed derivation for reproducible, schedule-independent randomness.
//!
//! Every parallelizable unit of work (a deployment, a tree, a grid cell)
//! derives its own RNG from `(master seed, index)` so results do not depend
//! on execution order or degree of parallelism.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The RNG used throughout the crate. ChaCha has a stable, portable stream
/// for a given seed, which the byte-identical-output contract relies on.
pub type Rng = ChaCha8Rng;

/// Mix a master seed with an index into a fresh 64-bit seed (splitmix64).
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut z = master
        .wrapping_add(0x9e37_79b9_7f4a_7c15u64.wrapping_mul(index.wrapping_add(1)));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// RNG for the work unit `index` under `master`.
pub fn rng_for(master: u64, index: u64) -> Rng {
    Rng::seed_from_u64(derive_seed(master, index))
}
