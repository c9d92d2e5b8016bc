//! Seeded, purpose-scoped random streams.
//!
//! Every source of randomness in a run is a separate stream derived from the
//! master seed, a purpose label, and an epoch index. Resuming at an epoch
//! boundary therefore reproduces the exact stream of an uninterrupted run
//! without serializing generator state.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// FNV-1a over a byte string; also used for config hashing.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x1000_0000_01b3);
    }
    h
}

fn mix(seed: u64, purpose: &str, epoch: u64) -> u64 {
    let mut h = fnv1a(purpose.as_bytes());
    h ^= seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    h = h.wrapping_mul(0x1000_0000_01b3);
    h ^= epoch.wrapping_add(0x6a09_e667_f3bc_c909).rotate_left(17);
    h.wrapping_mul(0x1000_0000_01b3)
}

/// Deterministic stream for `(seed, purpose, epoch)`.
pub fn stream(seed: u64, purpose: &str, epoch: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(seed, purpose, epoch))
}

/// Standard normal draw via Box-Muller; uniform inputs kept away from 0.
pub fn normal(rng: &mut impl Rng) -> f64 {
    let u1: f64 = loop {
        let u = rng.gen::<f64>();
        if u > 0.0 {
            break u;
        }
    };
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Fisher-Yates shuffle of `0..n` under the given stream.
pub fn permutation(n: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
    idx
}
