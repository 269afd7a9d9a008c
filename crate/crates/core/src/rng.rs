//! Seeded random-number streams.
//!
//! Every stochastic routine takes an explicit RNG handle. Parallel sweeps
//! need statistically independent streams that do not depend on scheduling
//! order, so runs are keyed by `(seed, stream)`: a counter-based generator
//! (ChaCha with an explicit 64-bit stream id) hands each run index its own
//! stream of the same seed.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The RNG used throughout the crate.
pub type Rng = ChaCha8Rng;

/// RNG for a top-level seed.
pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent stream `stream` of `seed`; bit-reproducible regardless of
/// which thread or order runs it.
pub fn stream(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Stream id for a (grid point, run) cell of a sweep.
pub fn cell_stream(grid_index: usize, run_index: usize) -> u64 {
    (grid_index as u64) << 32 | run_index as u64
}
