//! Deterministic per-purpose random streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent random streams derived from one run seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Epoch = 2,
    Pair = 3,
    Mask = 4,
    Clip = 5,
    Probe = 6,
    Policy = 7,
    Env = 8,
}

/// Generator for item `index` of `stream` under `seed`.
///
/// Streams never overlap, so results do not depend on the order or the
/// thread in which items are drawn.
pub fn stream_rng(seed: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((stream as u64) << 56) ^ index);
    rng
}
