//! Named RNG streams derived from one master seed.
//!
//! Each consumer (data shuffling, reparameterization noise, permutations,
//! interpolation draws, beta sampling, parameter init) gets its own stream so
//! changing one component's draw count never perturbs the others.

use rand_chacha::ChaCha12Rng;
use rand::SeedableRng;

/// Stable 64-bit FNV-1a over the stream name, folded with the master seed.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

pub fn stream_seed(master: u64, name: &str) -> u64 {
    fnv1a(name.as_bytes()) ^ master.wrapping_mul(0x9e3779b97f4a7c15)
}

pub fn stream_rng(master: u64, name: &str) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(stream_seed(master, name))
}

/// Uniform random permutation of `0..n` (fixed points allowed).
pub fn random_permutation(n: usize, rng: &mut impl rand::Rng) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        perm.swap(i, j);
    }
    perm
}
