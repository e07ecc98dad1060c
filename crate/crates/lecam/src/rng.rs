//! Seed derivation and generator construction.
//!
//! Every randomized routine takes a master seed plus a stream index and
//! builds its own ChaCha12 generator. Parallel loops hand each work item a
//! distinct stream, so scheduling order never affects output.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// SplitMix64 finalizer. Decorrelates (master, stream) pairs; consecutive
/// streams land in unrelated states.
pub fn derive(master: u64, stream: u64) -> u64 {
    let mut z = master ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn rng_for(master: u64, stream: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(derive(master, stream))
}

/// Dither uniform on (-1/2, 1/2]. The half-open side matters for the
/// quantile transform: integer + dither never rounds ambiguously at -1/2.
pub fn dither<R: Rng>(rng: &mut R) -> f64 {
    0.5 - rng.gen::<f64>()
}
