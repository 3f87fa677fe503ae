//! Named random substreams derived from a single experiment seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent randomness sources. Changing how one is consumed never shifts
/// the draws of another.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Encoder = 1,
    World = 2,
    Init = 3,
    Batching = 4,
    Augmentation = 5,
    Shift = 6,
    Bootstrap = 7,
}

pub fn substream(seed: u64, stream: Stream) -> ChaCha8Rng {
    indexed_substream(seed, stream, 0)
}

/// Substream `index` within `stream`, e.g. one per test image.
pub fn indexed_substream(seed: u64, stream: Stream, index: u32) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((stream as u64) << 32) | index as u64);
    rng
}
