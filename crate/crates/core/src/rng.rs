//! Seeded random streams.
//!
//! Every stochastic routine takes a caller-owned [`Stream`]. Parallel lanes get
//! their own stream from `(seed, lane)` so results do not depend on scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Stream = ChaCha8Rng;

/// Root stream for a seed.
pub fn stream(seed: u64) -> Stream {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent stream for lane `lane` under `seed`.
pub fn lane_stream(seed: u64, lane: u64) -> Stream {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(lane);
    rng
}
