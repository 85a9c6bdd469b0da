//! Deterministic random streams.
//!
//! Every source of randomness in the engine is derived from the single run
//! seed plus a stream id, so independent consumers (initialisation, the
//! training loop, each evaluated user) never share state and results do not
//! depend on thread scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type EngineRng = ChaCha8Rng;

pub const INIT_STREAM: u64 = 0;
pub const TRAIN_STREAM: u64 = 1;
pub const CHECKGRAD_STREAM: u64 = 2;
pub const SYNTHETIC_STREAM: u64 = 3;
const EVAL_STREAM_BASE: u64 = 1 << 32;
const SYNTHETIC_USER_BASE: u64 = 2 << 32;

pub fn stream(seed: u64, stream: u64) -> EngineRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Stream owned by one evaluated user.
pub fn eval_stream(seed: u64, user: usize) -> EngineRng {
    stream(seed, EVAL_STREAM_BASE + user as u64)
}

/// Stream owned by one generated synthetic user.
pub fn synthetic_user_stream(seed: u64, user: usize) -> EngineRng {
    stream(seed, SYNTHETIC_USER_BASE + user as u64)
}
