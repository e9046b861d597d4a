//! Seeded randomness with a pinned bit pattern.
//!
//! All stochastic choices (parameter init, shuffling, synthetic data) go
//! through these helpers so that a given seed reproduces byte-identical
//! results across runs and platforms. Conversions from raw ChaCha output
//! to floats/permutations are implemented here rather than borrowed from a
//! distributions crate, which keeps the bit pattern under our control.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

pub struct Rng(ChaCha8Rng);

/// Stream labels keep RNGs for unrelated purposes statistically and
/// reproducibly separate even when built from the same user seed.
#[derive(Debug, Clone, Copy)]
pub enum Stream {
    Init,
    EarlyExitInit,
    EarlyViewInit,
    FmapConcatInit,
    Shuffle { epoch: u64 },
    Synth,
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Stream::Init => 1,
            Stream::EarlyExitInit => 2,
            Stream::EarlyViewInit => 3,
            Stream::FmapConcatInit => 4,
            Stream::Shuffle { epoch } => 0x100 + epoch,
            Stream::Synth => 5,
        }
    }
}

impl Rng {
    pub fn new(seed: u64, stream: Stream) -> Self {
        Rng(ChaCha8Rng::seed_from_u64(splitmix64(
            seed ^ splitmix64(stream.tag()),
        )))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    /// Uniform in [0, 1) with 53 random bits.
    pub fn unit_f64(&mut self) -> f64 {
        (self.0.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [lo, hi).
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.unit_f64()
    }

    /// Standard normal via Box–Muller.
    pub fn normal(&mut self) -> f64 {
        let u1 = (self.unit_f64()).max(f64::MIN_POSITIVE);
        let u2 = self.unit_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Uniform integer in [0, n).
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (self.0.next_u64() % n as u64) as usize
    }

    /// Fisher–Yates permutation of 0..n.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.below(i + 1);
            idx.swap(i, j);
        }
        idx
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream_is_identical() {
        let mut a = Rng::new(7, Stream::Init);
        let mut b = Rng::new(7, Stream::Init);
        for _ in 0..32 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn streams_diverge() {
        let mut a = Rng::new(7, Stream::Init);
        let mut b = Rng::new(7, Stream::EarlyExitInit);
        assert_ne!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn permutation_is_a_permutation() {
        let mut r = Rng::new(3, Stream::Shuffle { epoch: 0 });
        let mut p = r.permutation(100);
        p.sort_unstable();
        assert_eq!(p, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn unit_f64_in_range() {
        let mut r = Rng::new(1, Stream::Synth);
        for _ in 0..1000 {
            let v = r.unit_f64();
            assert!((0.0..1.0).contains(&v));
        }
    }
}
