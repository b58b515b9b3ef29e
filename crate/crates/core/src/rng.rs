//! Deterministic, splittable random streams.
//!
//! Every stream is a ChaCha20 generator whose key is derived from
//! `(seed, label)` and whose stream id is a caller-supplied index, so
//! parallel workers can draw from independent streams without sharing state.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

pub type SbnnRng = ChaCha20Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngFactory {
    seed: u64,
}

impl RngFactory {
    pub fn new(seed: u64) -> Self {
        RngFactory { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self, label: &str) -> SbnnRng {
        self.substream(label, 0)
    }

    pub fn substream(&self, label: &str, index: u64) -> SbnnRng {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(label.as_bytes());
        let key: [u8; 32] = h.finalize().into();
        let mut rng = ChaCha20Rng::from_seed(key);
        rng.set_stream(index);
        rng
    }

    /// A child factory, for handing a sub-component its own namespace.
    pub fn child(&self, label: &str) -> RngFactory {
        let mut rng = self.stream(label);
        RngFactory { seed: rng.random() }
    }
}

pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

/// Unit Laplace draw by inverse CDF: `-sign(u - 1/2) ln(1 - 2|u - 1/2|)`.
pub fn unit_laplace<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u: f64 = rng.random();
    let c = u - 0.5;
    let tail = (1.0 - 2.0 * c.abs()).max(f64::MIN_POSITIVE);
    -c.signum() * tail.ln()
}

pub fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

pub fn normal_vec<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| standard_normal(rng)).collect()
}

/// Fisher-Yates permutation of `0..n`.
pub fn permutation<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let f = RngFactory::new(7);
        let a: Vec<u64> = (0..4).map(|_| f.stream("x").random()).collect();
        assert!(a.windows(2).all(|w| w[0] == w[1]));
        let mut s0 = f.substream("x", 0);
        let mut s1 = f.substream("x", 1);
        let mut other = f.stream("y");
        let v0: u64 = s0.random();
        assert_ne!(v0, s1.random::<u64>());
        assert_ne!(v0, other.random::<u64>());
    }

    #[test]
    fn laplace_moments() {
        let mut rng = RngFactory::new(1).stream("laplace");
        let n = 200_000;
        let xs: Vec<f64> = (0..n).map(|_| unit_laplace(&mut rng)).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        // unit Laplace: mean 0, variance 2
        assert!(mean.abs() < 0.02, "{mean}");
        assert!((var - 2.0).abs() < 0.05, "{var}");
    }

    #[test]
    fn permutation_is_a_permutation() {
        let mut rng = RngFactory::new(3).stream("perm");
        let mut p = permutation(&mut rng, 50);
        p.sort_unstable();
        assert_eq!(p, (0..50).collect::<Vec<_>>());
    }
}
