//! Deterministic keyed RNG streams.
//!
//! Every random decision draws from a stream keyed by `(seed, purpose, ...)`
//! so adding or removing one consumer never shifts the values another one
//! sees. Streams are ChaCha8 seeded through a splitmix-style mixer.

use alloc::vec::Vec;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Mix a 64-bit value (splitmix64 finalizer).
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a child seed from a parent seed and a stream of key parts.
pub fn derive_seed(seed: u64, keys: &[u64]) -> u64 {
    let mut h = mix(seed ^ 0xc0be_27d1_57ea_a11e);
    for &k in keys {
        h = mix(h ^ mix(k));
    }
    h
}

/// Hash a string label to a key part (FNV-1a).
pub fn key_of(label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// A deterministic RNG stream.
pub struct Stream {
    rng: ChaCha8Rng,
}

impl Stream {
    /// Open the stream for `(seed, label, keys...)`.
    pub fn open(seed: u64, label: &str, keys: &[u64]) -> Self {
        let mut parts = Vec::with_capacity(keys.len() + 1);
        parts.push(key_of(label));
        parts.extend_from_slice(keys);
        Stream { rng: ChaCha8Rng::seed_from_u64(derive_seed(seed, &parts)) }
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        // 53 random bits scaled into [0,1).
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in [0, n).
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        self.rng.random_range(0..n)
    }

    /// Bernoulli draw with success probability p.
    pub fn coin(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Standard normal via Box-Muller (one value per pair of uniforms; the
    /// second value is discarded to keep the stream position independent of
    /// call pairing).
    pub fn normal(&mut self) -> f64 {
        loop {
            let u1 = self.uniform();
            let u2 = self.uniform();
            if u1 <= 0.0 {
                continue;
            }
            let r = libm::sqrt(-2.0 * libm::log(u1));
            return r * libm::cos(2.0 * core::f64::consts::PI * u2);
        }
    }

    /// Normal truncated to [-2s, 2s] by redraw, scaled by `std`.
    pub fn trunc_normal(&mut self, std: f64) -> f64 {
        loop {
            let z = self.normal();
            if z.abs() <= 2.0 {
                return z * std;
            }
        }
    }

    /// Fisher-Yates shuffle of indices 0..n.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.below(i + 1);
            idx.swap(i, j);
        }
        idx
    }

    /// Sample an index with probability proportional to `weights`.
    pub fn weighted(&mut self, weights: &[f64]) -> usize {
        let total: f64 = weights.iter().sum();
        debug_assert!(total > 0.0);
        let mut u = self.uniform() * total;
        for (i, w) in weights.iter().enumerate() {
            if u < *w {
                return i;
            }
            u -= w;
        }
        weights.len() - 1
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derive_is_stable_and_key_sensitive() {
        let a = derive_seed(7, &[1, 2]);
        let b = derive_seed(7, &[1, 2]);
        let c = derive_seed(7, &[2, 1]);
        let d = derive_seed(8, &[1, 2]);
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }

    #[test]
    fn streams_are_independent_of_other_consumers() {
        // Draw from stream A, then open B: B must not depend on A's draws.
        let mut a1 = Stream::open(3, "a", &[]);
        let _ = a1.uniform();
        let mut b1 = Stream::open(3, "b", &[]);
        let b_first = b1.uniform();

        let mut b2 = Stream::open(3, "b", &[]);
        assert_eq!(b_first.to_bits(), b2.uniform().to_bits());
    }

    #[test]
    fn uniform_in_unit_interval() {
        let mut s = Stream::open(11, "u", &[]);
        for _ in 0..1000 {
            let v = s.uniform();
            assert!((0.0..1.0).contains(&v));
        }
    }

    #[test]
    fn normal_moments_are_sane() {
        let mut s = Stream::open(5, "n", &[]);
        let n = 20_000;
        let mut sum = 0.0;
        let mut sq = 0.0;
        for _ in 0..n {
            let z = s.normal();
            sum += z;
            sq += z * z;
        }
        let mean = sum / n as f64;
        let var = sq / n as f64 - mean * mean;
        assert!(mean.abs() < 0.03, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }

    #[test]
    fn trunc_normal_is_bounded() {
        let mut s = Stream::open(5, "t", &[]);
        for _ in 0..5000 {
            assert!(s.trunc_normal(0.02).abs() <= 0.04 + 1e-12);
        }
    }

    #[test]
    fn permutation_is_a_permutation() {
        let mut s = Stream::open(1, "p", &[]);
        let mut p = s.permutation(17);
        p.sort_unstable();
        assert_eq!(p, (0..17).collect::<Vec<_>>());
    }

    #[test]
    fn weighted_prefers_heavy_entries() {
        let mut s = Stream::open(2, "w", &[]);
        let w = [0.05, 0.9, 0.05];
        let mut counts = [0usize; 3];
        for _ in 0..2000 {
            counts[s.weighted(&w)] += 1;
        }
        assert!(counts[1] > 1500, "{counts:?}");
    }
}
