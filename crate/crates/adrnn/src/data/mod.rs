//! Procedural task generators and the on-disk shard format.

pub mod maze;
pub mod pathfinder;
pub mod shard;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Counter-based rng substream: each (seed, sample index, retry lane)
/// gets an independent deterministic stream, so parallel and serial
/// generation produce identical shards.
pub fn substream(seed: u64, index: u64, lane: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ lane.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(index);
    rng
}
