//! Seeded random streams.
//!
//! Every stochastic component draws from its own ChaCha8 stream. A stream is
//! built with `ChaCha8Rng::seed_from_u64(seed)` (the rand_core PCG32 seed
//! expansion) followed by `set_stream(id)`, where `id` is one of the
//! constants below. Two components with the same seed therefore never share
//! random numbers, and any stream can be replayed in isolation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// World generation: latents, projections, feature noise, frozen CTR noise.
pub const STREAM_WORLD: u64 = 1;
/// Training query sampling (users, candidates, labels).
pub const STREAM_TRAIN_QUERIES: u64 = 2;
/// Held-out evaluation query sampling.
pub const STREAM_EVAL_QUERIES: u64 = 3;
/// Serving-policy routing under a traffic split.
pub const STREAM_TRAFFIC: u64 = 4;
/// Shuffle buffer emission order.
pub const STREAM_SHUFFLE: u64 = 5;
/// Network weight initialisation.
pub const STREAM_INIT: u64 = 6;
/// Post-hoc calibration fitting queries (Platt baseline).
pub const STREAM_CALIBRATION_QUERIES: u64 = 7;

pub fn stream(seed: u64, id: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}
