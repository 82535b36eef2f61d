use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::scalar::Scalar;
use super::tensor::Tensor;

/// Counter-based generator keyed by `(seed, stream, index)`.
///
/// Element `i` of a stream always consumes the same four ChaCha words, so a
/// shard can draw exactly the values an unsharded initialisation would see
/// at the same logical positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeededRng {
    pub seed: u64,
    pub stream: u64,
}

const WORDS_PER_DRAW: u128 = 4;

impl SeededRng {
    pub fn new(seed: u64, stream: u64) -> Self {
        Self { seed, stream }
    }

    fn core_at(&self, index: u64) -> ChaCha8Rng {
        let mut core = ChaCha8Rng::seed_from_u64(self.seed);
        core.set_stream(self.stream);
        core.set_word_pos(index as u128 * WORDS_PER_DRAW);
        core
    }

    fn draw(core: &mut ChaCha8Rng) -> (f64, f64) {
        // Both in (0, 1].
        let a = ((core.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
        let b = ((core.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
        (a, b)
    }

    /// Uniform in (0, 1] at a logical index.
    pub fn uniform(&self, index: u64) -> f64 {
        Self::draw(&mut self.core_at(index)).0
    }

    /// Standard normal at a logical index (Box-Muller on the index's two words).
    pub fn normal(&self, index: u64) -> f64 {
        let (u1, u2) = Self::draw(&mut self.core_at(index));
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// `count` consecutive normals starting at `start`, identical to calling
    /// [`normal`](Self::normal) per index.
    pub fn normals(&self, start: u64, count: usize) -> Vec<f64> {
        let mut core = self.core_at(start);
        (0..count)
            .map(|_| {
                let (u1, u2) = Self::draw(&mut core);
                (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
            })
            .collect()
    }

    pub fn uniforms(&self, start: u64, count: usize) -> Vec<f64> {
        let mut core = self.core_at(start);
        (0..count).map(|_| Self::draw(&mut core).0).collect()
    }

    pub fn normal_tensor<T: Scalar>(&self, shape: &[usize], std: f64) -> Tensor<T> {
        let numel = shape.iter().product();
        let data = self
            .normals(0, numel)
            .into_iter()
            .map(|z| T::of(z * std))
            .collect();
        Tensor::new(shape, data).expect("shape matches draw count")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_key_same_values() {
        let a = SeededRng::new(42, 7).normals(0, 16);
        let b = SeededRng::new(42, 7).normals(0, 16);
        assert_eq!(a, b);
        assert_ne!(a, SeededRng::new(42, 8).normals(0, 16));
        assert_ne!(a, SeededRng::new(43, 7).normals(0, 16));
    }

    #[test]
    fn ranged_draws_match_per_index_draws() {
        let rng = SeededRng::new(1, 2);
        let block = rng.normals(37, 11);
        for (k, v) in block.iter().enumerate() {
            assert_eq!(*v, rng.normal(37 + k as u64));
        }
    }

    #[test]
    fn moments_are_plausible() {
        let z = SeededRng::new(9, 0).normals(0, 20_000);
        let mean = z.iter().sum::<f64>() / z.len() as f64;
        let var = z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / z.len() as f64;
        assert!(mean.abs() < 0.03, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }
}
