//! Root-seed splitting. Each consumer draws from its own ChaCha stream so
//! results for one consumer do not depend on how many draws another made.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Generator = 1,
    UniformSampler = 2,
    BalancedSampler = 3,
    InitUniform = 4,
    InitResidual = 5,
    MonteCarlo = 6,
    GradCheck = 7,
}

pub fn rng_for(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// Like [`rng_for`] but with an extra index, for sharded or per-trial work.
pub fn rng_for_indexed(seed: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(((stream as u64) << 32) | (index & 0xFFFF_FFFF));
    rng
}
