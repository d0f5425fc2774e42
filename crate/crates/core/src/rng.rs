//! Seeded random streams.
//!
//! All randomness goes through ChaCha8 keyed by `(seed, stream)`. ChaCha is a
//! counter-based generator, so a given pair produces the same sequence on every
//! platform, and independent work items (Monte-Carlo chunks, bags, restarts)
//! get their own stream instead of sharing a sequential state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn seeded(seed: u64) -> ChaCha8Rng {
    stream_rng(seed, 0)
}
