//! Seedable, stream-addressable random numbers.
//!
//! Every consumer (weight init, corruption sampling, shuffling) draws from
//! its own stream so that changing how many numbers one consumer uses never
//! perturbs another. ChaCha is a counter-mode generator, so a stream is just
//! a (seed, stream id) pair.

use rand::seq::SliceRandom;
use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};

/// Well-known stream ids.
pub mod streams {
    pub const INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const CORRUPT: u64 = 3;
    pub const DATASET: u64 = 4;
    pub const SPLIT: u64 = 5;
}

#[derive(Debug, Clone)]
pub struct Rng {
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self::stream(seed, 0)
    }

    pub fn stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { inner }
    }

    /// Independent child generator, e.g. one per dataset sample.
    pub fn derive(seed: u64, stream: u64, index: u64) -> Self {
        // splitmix64 finalizer so neighbouring indices land on unrelated seeds
        let mut z = seed ^ index.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
        Self::stream(z, stream)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in [0, n).
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn poisson(&mut self, lambda: f64) -> f64 {
        if lambda <= 0.0 {
            return 0.0;
        }
        match Poisson::new(lambda) {
            Ok(p) => p.sample(&mut self.inner),
            Err(_) => 0.0,
        }
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let mut a = Rng::stream(7, 3);
        let mut b = Rng::stream(7, 3);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn streams_are_independent() {
        let mut a = Rng::stream(7, 1);
        let mut b = Rng::stream(7, 2);
        let xs: Vec<u64> = (0..8).map(|_| a.next_u64()).collect();
        let ys: Vec<u64> = (0..8).map(|_| b.next_u64()).collect();
        assert_ne!(xs, ys);
    }

    #[test]
    fn derived_children_differ() {
        let mut a = Rng::derive(1, 0, 0);
        let mut b = Rng::derive(1, 0, 1);
        assert_ne!(a.next_u64(), b.next_u64());
        let mut c = Rng::derive(1, 0, 1);
        let mut d = Rng::derive(1, 0, 1);
        assert_eq!(c.uniform().to_bits(), d.uniform().to_bits());
    }

    #[test]
    fn poisson_degenerate_rate() {
        let mut r = Rng::new(0);
        assert_eq!(r.poisson(0.0), 0.0);
    }
}
