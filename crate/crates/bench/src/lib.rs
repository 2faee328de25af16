//! Seeded inputs shared by the kernel benchmarks.

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use resad_core::{FeatureMap, Level};

pub fn random_rows(rows: usize, cols: usize, seed: u64) -> Array2<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-1.0..1.0))
}

pub fn random_feature_map(h: usize, w: usize, c: usize, seed: u64) -> FeatureMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Small magnitudes keep unscaled attention logits finite for large c.
    let scale = 1.0 / (c as f32).sqrt();
    let data = Array3::from_shape_simple_fn((h, w, c), || rng.random_range(-scale..scale));
    FeatureMap::new(data, Level::Fused).expect("finite values")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inputs_are_seeded() {
        assert_eq!(random_rows(4, 3, 1), random_rows(4, 3, 1));
        assert_ne!(random_rows(4, 3, 1), random_rows(4, 3, 2));
        assert_eq!(random_feature_map(2, 3, 4, 0).dim(), (2, 3, 4));
    }
}
