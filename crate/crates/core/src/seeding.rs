//! Named random substreams. Every random draw in the crate comes from a
//! ChaCha8 generator keyed by the run seed and one of these stream ids.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Token basis draws; retries use `TOKENS + attempt`.
pub const TOKENS: u64 = 0;
pub const INIT: u64 = 100;
pub const BATCHES: u64 = 200;
pub const PROBE: u64 = 300;
pub const TEST: u64 = 400;
pub const EVAL: u64 = 500;
pub const FIXTURE: u64 = 600;

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
