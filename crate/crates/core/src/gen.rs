//! Seeded problem instances.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::types::{DenseMatrix, Real, Storage, TargetVector};

/// Sentinel used for ignored positions in generated instances.
pub const IGNORE_INDEX: i64 = -100;

#[derive(Debug, Clone)]
pub struct Instance<T> {
    pub hidden: DenseMatrix<T>,
    pub weight: DenseMatrix<T>,
    pub targets: TargetVector,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InstanceSpec {
    pub positions: usize,
    pub hidden: usize,
    pub vocab: usize,
    /// Elements are uniform in `[-scale, scale]`.
    pub scale: f64,
    /// Probability that a position is ignored; zero disables the ignore index.
    pub ignore_fraction: f64,
    pub storage: Storage,
}

impl InstanceSpec {
    pub fn new(positions: usize, hidden: usize, vocab: usize) -> Self {
        Self {
            positions,
            hidden,
            vocab,
            scale: 1.0,
            ignore_fraction: 0.0,
            storage: Storage::SameAsCompute,
        }
    }

    /// Scale `1/sqrt(d)` keeps logits O(1).
    pub fn benchmark(positions: usize, hidden: usize, vocab: usize) -> Self {
        Self {
            scale: 1.0 / (hidden.max(1) as f64).sqrt(),
            ..Self::new(positions, hidden, vocab)
        }
    }

    pub fn with_scale(mut self, scale: f64) -> Self {
        self.scale = scale;
        self
    }

    pub fn with_ignore_fraction(mut self, fraction: f64) -> Self {
        self.ignore_fraction = fraction;
        self
    }

    pub fn with_storage(mut self, storage: Storage) -> Self {
        self.storage = storage;
        self
    }

    /// Draw an instance. Values are sampled in f64 and cast, so the same
    /// seed gives the same instance up to rounding in every precision.
    pub fn generate<T: Real>(&self, rng: &mut impl Rng) -> Instance<T> {
        let mut matrix = |rows: usize| {
            let data = (0..rows * self.hidden)
                .map(|_| T::cast(rng.gen_range(-1.0..=1.0) * self.scale))
                .collect();
            DenseMatrix::from_vec(rows, self.hidden, data)
                .expect("generated length matches shape")
                .with_storage(self.storage)
        };
        let hidden = matrix(self.positions);
        let weight = matrix(self.vocab);
        let raw = (0..self.positions)
            .map(|_| {
                if self.ignore_fraction > 0.0 && rng.gen_bool(self.ignore_fraction) {
                    IGNORE_INDEX
                } else {
                    rng.gen_range(0..self.vocab.max(1)) as i64
                }
            })
            .collect();
        let mut targets = TargetVector::new(raw);
        if self.ignore_fraction > 0.0 {
            targets = targets.with_ignore_index(IGNORE_INDEX);
        }
        Instance {
            hidden,
            weight,
            targets,
        }
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derive a sub-seed from a base seed and coordinates (splitmix64 mixing).
pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    let mut x = seed;
    for &p in parts {
        x ^= p.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(x << 6).wrapping_add(x >> 2);
        x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = x;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        x = z ^ (z >> 31);
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_instance() {
        let spec = InstanceSpec::new(5, 4, 9).with_ignore_fraction(0.3);
        let a: Instance<f32> = spec.generate(&mut rng(7));
        let b: Instance<f32> = spec.generate(&mut rng(7));
        assert_eq!(a.hidden, b.hidden);
        assert_eq!(a.targets, b.targets);
        a.targets.validate(9).unwrap();
    }

    #[test]
    fn values_within_scale() {
        let spec = InstanceSpec::benchmark(3, 16, 5);
        let inst: Instance<f64> = spec.generate(&mut rng(1));
        assert!(inst.weight.as_slice().iter().all(|x| x.abs() <= 0.25));
    }

    #[test]
    fn derived_seeds_differ() {
        assert_ne!(derive_seed(42, &[1, 2]), derive_seed(42, &[2, 1]));
        assert_eq!(derive_seed(42, &[1, 2]), derive_seed(42, &[1, 2]));
    }
}
