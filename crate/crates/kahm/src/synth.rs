//! Synthetic fixtures for tests, demos, and benchmarks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::dataset::{DataMatrix, LabeledDataset};

/// Isotropic Gaussian blobs, one class per center, `per_class` rows each.
pub fn gaussian_blobs(
    centers: &[Vec<f64>],
    per_class: usize,
    std_dev: f64,
    seed: u64,
) -> LabeledDataset {
    assert!(!centers.is_empty() && per_class > 0);
    let p = centers[0].len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, std_dev).expect("positive std dev");
    let mut rows = Vec::with_capacity(centers.len() * per_class);
    let mut labels = Vec::with_capacity(centers.len() * per_class);
    for (c, center) in centers.iter().enumerate() {
        for _ in 0..per_class {
            let row: Vec<f64> = (0..p).map(|j| center[j] + normal.sample(&mut rng)).collect();
            rows.push(row);
            labels.push(c + 1);
        }
    }
    let data = DataMatrix::from_rows(&rows).expect("generated rows are finite");
    let class_names = (1..=centers.len()).map(|c| c.to_string()).collect();
    LabeledDataset::new(data, labels, class_names).expect("labels are consistent")
}

/// Standard-normal matrix, for timing grids.
pub fn standard_normal_matrix(n: usize, p: usize, seed: u64) -> DataMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..p).map(|_| normal.sample(&mut rng)).collect())
        .collect();
    DataMatrix::from_rows(&rows).expect("generated rows are finite")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blobs_shape_and_labels() {
        let ds = gaussian_blobs(&[vec![0.0, 0.0], vec![5.0, 5.0]], 10, 0.1, 3);
        assert_eq!(ds.data.n_rows(), 20);
        assert_eq!(ds.class_count(), 2);
        assert_eq!(ds.labels[0], 1);
        assert_eq!(ds.labels[19], 2);
    }

    #[test]
    fn blobs_deterministic() {
        let a = gaussian_blobs(&[vec![0.0]], 5, 1.0, 9);
        let b = gaussian_blobs(&[vec![0.0]], 5, 1.0, 9);
        assert_eq!(a.data.inner(), b.data.inner());
    }
}
