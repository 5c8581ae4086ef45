//! Gaussian kernels, Gram matrices, regularized least squares, and the
//! fixed-point determination of the regularization parameter.
//!
//! The regularization parameter is chosen larger than the training
//! mean-squared error: λ = e(λ) + τ with τ fixed at its minimum feasible
//! value 2‖Y‖²_F/(pN). Substituting turns the choice into a fixed-point
//! problem e = 𝓡(e, τ) for the map 𝓡 below, which is a contraction for that
//! τ, so simple iteration converges to the unique fixed point ê and
//! λ* = ê + τ.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rayon::prelude::*;

use crate::error::{KahmError, Result};

/// Relative stopping tolerance of the fixed-point iteration.
const FIXED_POINT_TOL: f64 = 1e-12;
/// Iteration cap; contraction makes this safety only.
const FIXED_POINT_MAX_ITER: usize = 1000;

/// Covariance of the projected training points, factored for quadratic-form
/// evaluation x^T θ⁻¹ x.
///
/// θ is jittered with a small ridge before factorization when it is not
/// numerically positive definite (degenerate projections).
#[derive(Debug, Clone)]
pub struct KernelShape {
    theta: DMatrix<f64>,
    chol_l: DMatrix<f64>,
}

impl KernelShape {
    /// Build from a symmetric covariance matrix, applying the ridge policy.
    pub fn from_covariance(theta: DMatrix<f64>) -> Result<Self> {
        if theta.nrows() != theta.ncols() {
            return Err(KahmError::DimensionMismatch("theta must be square".into()));
        }
        let n = theta.nrows();
        let mut theta = (&theta + theta.transpose()) * 0.5;

        let eigs = theta.clone().symmetric_eigenvalues();
        let min_eig = eigs.min();
        let max_eig = eigs.max();
        let needs_jitter = min_eig <= 0.0 || max_eig / min_eig > 1e12;
        if needs_jitter {
            let ridge = 1e-10 * theta.trace() / n as f64 + 1e-30;
            for i in 0..n {
                theta[(i, i)] += ridge;
            }
        }

        let mut attempt = theta.clone();
        let mut ridge = 1e-10 * theta.trace() / n as f64 + 1e-30;
        for _ in 0..8 {
            if let Some(chol) = Cholesky::new(attempt.clone()) {
                return Ok(KernelShape { theta: attempt, chol_l: chol.l() });
            }
            ridge *= 1e3;
            attempt = theta.clone();
            for i in 0..n {
                attempt[(i, i)] += ridge;
            }
        }
        Err(KahmError::Factorization(
            "covariance not positive definite after jitter".into(),
        ))
    }

    pub fn dim(&self) -> usize {
        self.theta.nrows()
    }

    pub fn theta(&self) -> &DMatrix<f64> {
        &self.theta
    }

    /// x^T θ⁻¹ x via the Cholesky factor.
    pub fn quad_form(&self, x: &DVector<f64>) -> f64 {
        let z = self
            .chol_l
            .solve_lower_triangular(x)
            .expect("factor is nonsingular by construction");
        z.norm_squared()
    }

    /// Map points (rows) into whitened coordinates where the kernel becomes
    /// exp(-0.5‖z_i - z_j‖²).
    pub(crate) fn whiten_rows(&self, points: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol_l
            .solve_lower_triangular(&points.transpose())
            .expect("factor is nonsingular by construction")
            .transpose()
    }

    pub(crate) fn whiten_vec(&self, x: &DVector<f64>) -> DVector<f64> {
        self.chol_l
            .solve_lower_triangular(x)
            .expect("factor is nonsingular by construction")
    }
}

/// k_θ(u, v) = exp(-0.5 (u-v)^T θ⁻¹ (u-v)), in (0, 1].
pub fn gaussian_kernel(u: &DVector<f64>, v: &DVector<f64>, shape: &KernelShape) -> Result<f64> {
    if u.len() != shape.dim() || v.len() != shape.dim() {
        return Err(KahmError::DimensionMismatch(format!(
            "kernel arguments of length {}/{} for shape of dim {}",
            u.len(),
            v.len(),
            shape.dim()
        )));
    }
    if u.iter().chain(v.iter()).any(|x| !x.is_finite()) {
        return Err(KahmError::invalid("non-finite kernel input"));
    }
    Ok((-0.5 * shape.quad_form(&(u - v))).exp())
}

/// Symmetric Gram matrix with exact unit diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelMatrix {
    inner: DMatrix<f64>,
}

impl KernelMatrix {
    pub fn inner(&self) -> &DMatrix<f64> {
        &self.inner
    }

    pub fn size(&self) -> usize {
        self.inner.nrows()
    }

    /// Wrap a raw symmetric matrix (used by tests constructing Gram matrices
    /// directly).
    pub fn from_raw(inner: DMatrix<f64>) -> Result<Self> {
        if inner.nrows() != inner.ncols() {
            return Err(KahmError::DimensionMismatch("Gram matrix must be square".into()));
        }
        Ok(KernelMatrix { inner })
    }

    pub fn eigenvalue_range(&self) -> (f64, f64) {
        let eigs = self.inner.clone().symmetric_eigenvalues();
        (eigs.min(), eigs.max())
    }
}

/// Gram matrix K_ij = k_θ(x_i, x_j) of the given points (rows).
pub fn kernel_matrix(points: &DMatrix<f64>, shape: &KernelShape) -> KernelMatrix {
    let n = points.nrows();
    let z = shape.whiten_rows(points);
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            (0..n)
                .map(|j| {
                    if i == j {
                        1.0
                    } else {
                        let q: f64 = (0..z.ncols())
                            .map(|k| (z[(i, k)] - z[(j, k)]) * (z[(i, k)] - z[(j, k)]))
                            .sum();
                        (-0.5 * q).exp()
                    }
                })
                .collect()
        })
        .collect();
    let inner = DMatrix::from_fn(n, n, |i, j| rows[i][j]);
    KernelMatrix { inner }
}

/// W = (K + λI)⁻¹ Y via symmetric positive-definite factorization.
pub fn rls_solve(k: &KernelMatrix, y: &DMatrix<f64>, lambda: f64) -> Result<DMatrix<f64>> {
    if lambda <= 0.0 {
        return Err(KahmError::invalid("lambda must be positive"));
    }
    if y.nrows() != k.size() {
        return Err(KahmError::DimensionMismatch(format!(
            "{} targets for Gram matrix of size {}",
            y.nrows(),
            k.size()
        )));
    }
    let chol = regularized_cholesky(k, lambda)?;
    Ok(chol.solve(y))
}

pub(crate) fn regularized_cholesky(k: &KernelMatrix, lambda: f64) -> Result<Cholesky<f64, Dyn>> {
    let mut a = k.inner.clone();
    for i in 0..a.nrows() {
        a[(i, i)] += lambda;
    }
    Cholesky::new(a).ok_or_else(|| {
        KahmError::Factorization(format!("K + {lambda:.3e}·I is not positive definite"))
    })
}

/// 𝓡(e, τ) = (1/pN) Σ_j ‖(Y)_{:,j} - K (K + (e+τ)I)⁻¹ (Y)_{:,j}‖².
pub fn mse_map(k: &KernelMatrix, y: &DMatrix<f64>, e: f64, tau: f64) -> f64 {
    let w = regularized_cholesky(k, e + tau)
        .expect("K + (e+τ)I is SPD for e+τ > 0")
        .solve(y);
    let residual = y - &k.inner * w;
    residual.norm_squared() / (y.ncols() as f64 * y.nrows() as f64)
}

/// Result of the fixed-point search for the regularization parameter.
#[derive(Debug, Clone, Copy)]
pub struct FixedPointResult {
    /// Fixed point ê of 𝓡(·, τ).
    pub e_hat: f64,
    /// λ* = ê + 2‖Y‖²_F/(pN).
    pub lambda_star: f64,
    pub iterations: usize,
    /// |e_{it+1} - e_it| at the stop.
    pub residual: f64,
}

/// Iterate e ← 𝓡(e, τ) with τ = 2‖Y‖²_F/(pN) from the midpoint of the
/// admissible interval until the relative change drops below 1e-12.
pub fn find_lambda_star(k: &KernelMatrix, y: &DMatrix<f64>) -> Result<FixedPointResult> {
    let pn = y.ncols() as f64 * y.nrows() as f64;
    let bound = y.norm_squared() / pn;
    if bound == 0.0 {
        return Err(KahmError::ZeroTargets);
    }
    let tau = 2.0 * bound;
    let mut e = 0.5 * bound;
    let mut residual = f64::INFINITY;
    let mut iterations = 0;
    for it in 1..=FIXED_POINT_MAX_ITER {
        let next = mse_map(k, y, e, tau);
        residual = (next - e).abs();
        e = next;
        iterations = it;
        if residual <= FIXED_POINT_TOL * (1.0 + e) {
            break;
        }
    }
    Ok(FixedPointResult { e_hat: e, lambda_star: e + tau, iterations, residual })
}
