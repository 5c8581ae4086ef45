//! Optimal (ε,δ)-differentially-private noise under d-adjacency.
//!
//! The noise density that minimizes the expected magnitude subject to the
//! (ε,δ) sufficient conditions is a point mass δ at zero mixed with
//! (1-δ)·Laplace(scale d/ε). Samples are drawn by inverse transform sampling
//! with a seeded ChaCha8 generator, so privatization is reproducible across
//! platforms.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dataset::DataMatrix;
use crate::error::{KahmError, Result};

/// Parameters of the noise mechanism.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrivacySpec {
    /// Privacy-loss bound, > 0.
    pub epsilon: f64,
    /// Failure probability, in (0,1).
    pub delta: f64,
    /// Adjacency bound: the largest change of a single matrix entry.
    pub d: f64,
    pub seed: u64,
}

impl PrivacySpec {
    pub fn new(epsilon: f64, delta: f64, d: f64, seed: u64) -> Result<Self> {
        let spec = PrivacySpec { epsilon, delta, d, seed };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(KahmError::invalid("epsilon must be positive"));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(KahmError::invalid("delta must lie in (0,1)"));
        }
        if !(self.d > 0.0 && self.d.is_finite()) {
            return Err(KahmError::invalid("d must be positive"));
        }
        Ok(())
    }

    pub fn with_seed(self, seed: u64) -> Self {
        PrivacySpec { seed, ..self }
    }
}

/// Inverse CDF of the optimal noise distribution.
///
/// Branch boundaries map to the closed middle branch (value 0); the
/// boundaries have measure zero under the uniform draw.
pub fn inverse_cdf(t: f64, spec: &PrivacySpec) -> Result<f64> {
    if !(t > 0.0 && t < 1.0) {
        return Err(KahmError::invalid(format!("t = {t} outside (0,1)")));
    }
    spec.validate()?;
    let scale = spec.d / spec.epsilon;
    let lo = (1.0 - spec.delta) / 2.0;
    let hi = (1.0 + spec.delta) / 2.0;
    Ok(if t < lo {
        scale * (2.0 * t / (1.0 - spec.delta)).ln()
    } else if t > hi {
        -scale * (2.0 * (1.0 - t) / (1.0 - spec.delta)).ln()
    } else {
        0.0
    })
}

fn draw_unit_open(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let t: f64 = rng.random();
        if t > 0.0 && t < 1.0 {
            return t;
        }
    }
}

/// Draw `count` noise values from the seeded generator.
pub fn sample_noise(spec: &PrivacySpec, count: usize) -> Result<Vec<f64>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    (0..count)
        .map(|_| inverse_cdf(draw_unit_open(&mut rng), spec))
        .collect()
}

/// Add independent noise to every entry. Row i draws from a generator seeded
/// with `seed ^ i`, so the result is deterministic and row-parallel.
pub fn privatize_matrix(y: &DataMatrix, spec: &PrivacySpec) -> Result<DataMatrix> {
    spec.validate()?;
    let m = y.inner();
    let (n, p) = (m.nrows(), m.ncols());
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ i as u64);
            (0..p)
                .map(|j| {
                    let noise = inverse_cdf(draw_unit_open(&mut rng), spec)
                        .expect("draw is inside (0,1) and spec validated");
                    m[(i, j)] + noise
                })
                .collect()
        })
        .collect();
    DataMatrix::new(DMatrix::from_fn(n, p, |i, j| rows[i][j]))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(epsilon: f64, delta: f64, d: f64) -> PrivacySpec {
        PrivacySpec::new(epsilon, delta, d, 7).unwrap()
    }

    #[test]
    fn middle_branch_is_zero() {
        let s = spec(1.0, 0.1, 1.0);
        assert_eq!(inverse_cdf(0.5, &s).unwrap(), 0.0);
    }

    #[test]
    fn left_branch_closed_form() {
        let s = spec(1.0, 0.1, 1.0);
        let v = inverse_cdf(0.1, &s).unwrap();
        assert!((v - (0.2f64 / 0.9).ln()).abs() < 1e-12);
        assert!((v + 1.50408).abs() < 1e-5);
    }

    #[test]
    fn right_branch_closed_form() {
        let s = spec(1.0, 0.1, 1.0);
        let v = inverse_cdf(0.99, &s).unwrap();
        assert!((v + (0.02f64 / 0.9).ln()).abs() < 1e-12);
        assert!((v - 3.80666).abs() < 1e-5);
    }

    #[test]
    fn rejects_t_outside_unit_interval() {
        let s = spec(1.0, 0.1, 1.0);
        assert!(inverse_cdf(0.0, &s).is_err());
        assert!(inverse_cdf(1.0, &s).is_err());
        assert!(inverse_cdf(-0.2, &s).is_err());
    }

    #[test]
    fn inverse_cdf_nondecreasing_and_antisymmetric() {
        let s = spec(2.0, 0.2, 1.5);
        let grid: Vec<f64> = (1..2000).map(|k| k as f64 / 2000.0).collect();
        let mut prev = f64::NEG_INFINITY;
        for &t in &grid {
            let v = inverse_cdf(t, &s).unwrap();
            assert!(v >= prev);
            prev = v;
            let mirrored = inverse_cdf(1.0 - t, &s).unwrap();
            assert!((v + mirrored).abs() <= 1e-12, "t={t}: {v} vs {mirrored}");
        }
    }

    #[test]
    fn zero_fraction_matches_delta() {
        let s = spec(1.0, 0.25, 1.0);
        let samples = sample_noise(&s, 200_000).unwrap();
        let zeros = samples.iter().filter(|&&v| v == 0.0).count() as f64;
        let frac = zeros / samples.len() as f64;
        assert!((frac - 0.25).abs() < 0.005, "zero fraction {frac}");
    }

    #[test]
    fn sample_mean_near_zero() {
        let s = spec(1.0, 0.1, 1.0);
        let samples = sample_noise(&s, 500_000).unwrap();
        let mean: f64 = samples.iter().sum::<f64>() / samples.len() as f64;
        // Var of the mixture: (1-δ)·2(d/ε)²; allow 4 standard errors.
        let sd = ((1.0 - 0.1) * 2.0f64).sqrt() / (samples.len() as f64).sqrt();
        assert!(mean.abs() < 4.0 * sd, "mean {mean} vs 4se {}", 4.0 * sd);
    }

    #[test]
    fn near_one_delta_silences_noise() {
        let s = spec(1.0, 0.999, 1.0);
        let samples = sample_noise(&s, 10_000).unwrap();
        let zeros = samples.iter().filter(|&&v| v == 0.0).count();
        assert!(zeros > 9_900);
    }

    #[test]
    fn privatize_preserves_shape_and_is_deterministic() {
        let y = DataMatrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        let s = spec(1.0, 0.1, 1.0);
        let a = privatize_matrix(&y, &s).unwrap();
        let b = privatize_matrix(&y, &s).unwrap();
        assert_eq!(a.n_rows(), 3);
        assert_eq!(a.n_cols(), 2);
        assert_eq!(a.inner(), b.inner());
    }

    #[test]
    fn privatize_near_one_delta_is_identity_like() {
        let y = DataMatrix::from_rows(&[vec![1.0, -1.0], vec![0.5, 0.25]]).unwrap();
        let s = PrivacySpec::new(1.0, 1.0 - 1e-12, 1.0, 3).unwrap();
        let out = privatize_matrix(&y, &s).unwrap();
        assert_eq!(out.inner(), y.inner());
    }

    #[test]
    fn mean_absolute_perturbation_matches_mixture() {
        let y = DataMatrix::new(DMatrix::zeros(1000, 10)).unwrap();
        let s = spec(2.0, 0.2, 1.0);
        let out = privatize_matrix(&y, &s).unwrap();
        let mean_abs: f64 =
            out.inner().iter().map(|v| v.abs()).sum::<f64>() / (1000.0 * 10.0);
        let expected = (1.0 - 0.2) * 1.0 / 2.0; // (1-δ)·d/ε
        assert!(
            (mean_abs - expected).abs() < 0.05 * expected,
            "mean |noise| {mean_abs} vs {expected}"
        );
    }
}
