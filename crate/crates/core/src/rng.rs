//! Seed derivation for reproducible parallel Monte Carlo.
//!
//! Every random stream is a ChaCha8 generator keyed by a 64-bit seed and a
//! stream number. Replica `i` of a run always uses stream `i`, so results do
//! not depend on how replicas are scheduled across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Domain tags keep the seeds of unrelated consumers apart.
pub mod tag {
    pub const SITE: u64 = 0x5172_e5e5_0000_0001;
    pub const ENV_REPLICA: u64 = 0x5172_e5e5_0000_0002;
    pub const WALK: u64 = 0x5172_e5e5_0000_0003;
    pub const SPLIT: u64 = 0x5172_e5e5_0000_0004;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes a seed with a domain tag and an index into a fresh seed.
pub fn derive(seed: u64, tag: u64, index: u64) -> u64 {
    splitmix64(splitmix64(seed ^ tag).wrapping_add(index))
}

/// Maps a signed site index onto `u64` without collisions.
pub fn zigzag(x: i64) -> u64 {
    ((x << 1) ^ (x >> 63)) as u64
}

/// Generator for stream `stream` of master seed `seed`.
pub fn stream(seed: u64, stream: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Generator for a site of an environment; a pure function of `(seed, x)`.
pub fn site_rng(env_seed: u64, x: i64) -> StreamRng {
    stream(derive(env_seed, tag::SITE, 0), zigzag(x))
}
