//! Seed derivation. Every chain owns a ChaCha stream seeded from
//! `(master seed, init index, chain index)`, so adding chains or inits never
//! changes the streams of existing ones.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Random stream owned by a single chain.
pub type ChainRng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes a master seed with two indices into a child seed.
pub fn derive_seed(master: u64, a: u64, b: u64) -> u64 {
    let h = splitmix64(master ^ 0x5851_f42d_4c95_7f2d);
    let h = splitmix64(h ^ a);
    splitmix64(h.rotate_left(17) ^ b)
}

pub fn chain_rng(seed: u64) -> ChainRng {
    ChaCha8Rng::seed_from_u64(seed)
}
