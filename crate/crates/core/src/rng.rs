//! Seeded random streams.
//!
//! Every consumer derives its generator from a run seed plus a stream id so
//! that replications and per-flow sources never share state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Generator for `(seed, stream)`. Distinct streams are independent.
pub fn stream(seed: u64, stream: u64) -> Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// Plain generator for a seed (stream 0).
pub fn seeded(seed: u64) -> Rng {
    stream(seed, 0)
}
