//! Fitting and evaluating a single kernel affine hull machine.
//!
//! A fitted machine sends an arbitrary point y to an affine combination of
//! the training rows: project with the PCA encoding P, evaluate the Gaussian
//! kernel against every projected training point, weight through the cached
//! solve operator (K + λ*I)⁻¹, and normalize the weights to sum to one. The
//! output therefore always lies in the affine hull of the training rows, and
//! its norm obeys the certificate bounds below.

use nalgebra::{DMatrix, DVector};

use crate::dataset::DataMatrix;
use crate::error::{KahmError, Result};
use crate::kernel::{find_lambda_star, kernel_matrix, regularized_cholesky, KernelMatrix, KernelShape};

/// Above this size the explicit inverse is not materialized and evaluations
/// solve against the Cholesky factor instead.
const EXPLICIT_INVERSE_LIMIT: usize = 4096;

/// Cached solve operator (K + λ*I)⁻¹.
#[derive(Debug, Clone)]
pub enum SolveOp {
    /// Explicit inverse; repeated evaluation is a matrix-vector product.
    Inverse(DMatrix<f64>),
    /// Lower Cholesky factor L with L Lᵀ = K + λ*I.
    Factor(DMatrix<f64>),
}

impl SolveOp {
    pub(crate) fn apply_vec(&self, rhs: &DVector<f64>) -> DVector<f64> {
        match self {
            SolveOp::Inverse(inv) => inv * rhs,
            SolveOp::Factor(l) => {
                let z = l.solve_lower_triangular(rhs).expect("nonsingular factor");
                l.transpose().solve_upper_triangular(&z).expect("nonsingular factor")
            }
        }
    }

    pub(crate) fn apply_mat(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            SolveOp::Inverse(inv) => inv * rhs,
            SolveOp::Factor(l) => {
                let z = l.solve_lower_triangular(rhs).expect("nonsingular factor");
                l.transpose().solve_upper_triangular(&z).expect("nonsingular factor")
            }
        }
    }
}

/// One trained kernel affine hull machine.
#[derive(Debug, Clone)]
pub struct KahmModel {
    y: DataMatrix,
    encoding: DMatrix<f64>,
    shape: KernelShape,
    lambda_star: f64,
    solve_op: SolveOp,
    // Derived caches, reconstructed on deserialization.
    projected: DMatrix<f64>,
    whitened: DMatrix<f64>,
    gram: KernelMatrix,
}

/// Boundedness certificate from the fitted Gram spectrum.
#[derive(Debug, Clone, Copy)]
pub struct BoundCertificate {
    /// (λ* + μ_max(K)) / (λ* + μ_min(K)).
    pub ratio_bound_tight: f64,
    /// 1 + pN²/(2‖Y‖²_F), always the looser of the two.
    pub ratio_bound_loose: f64,
    /// ‖Y‖₂ · ratio_bound_tight, a bound on ‖𝓐(y)‖ for every y.
    pub norm_bound: f64,
}

/// Rows of the encoding matrix are the top-n orthonormal eigenvectors of the
/// sample covariance of the rows of `y`, ordered by descending eigenvalue.
/// The largest-magnitude component of each eigenvector is made positive so
/// fitted models are reproducible.
pub fn pca_encoding(y: &DataMatrix, n: usize) -> Result<DMatrix<f64>> {
    let p = y.n_cols();
    let rows = y.n_rows();
    if rows < 2 {
        return Err(KahmError::invalid("need at least 2 rows for an encoding"));
    }
    if n == 0 || n > p {
        return Err(KahmError::invalid(format!(
            "subspace dimension {n} out of range for ambient dimension {p}"
        )));
    }
    let basis = pca_basis(y);
    Ok(basis.rows(0, n).into_owned())
}

/// Full p×p orthonormal eigenbasis of the sample covariance (rows, sorted by
/// descending eigenvalue, sign-fixed). Shared by all layers of a deep fit.
pub(crate) fn pca_basis(y: &DataMatrix) -> DMatrix<f64> {
    let m = y.inner();
    let (nrows, p) = (m.nrows(), m.ncols());
    let mean = m.row_mean();
    let mut centered = m.clone();
    for i in 0..nrows {
        for j in 0..p {
            centered[(i, j)] -= mean[j];
        }
    }
    let cov = centered.transpose() * &centered / (nrows as f64 - 1.0);
    let eig = cov.symmetric_eigen();

    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap()
            .then(a.cmp(&b))
    });

    DMatrix::from_fn(p, p, |r, c| {
        let col = eig.eigenvectors.column(order[r]);
        let mut max_idx = 0;
        let mut max_abs = 0.0;
        for (i, &v) in col.iter().enumerate() {
            if v.abs() > max_abs {
                max_abs = v.abs();
                max_idx = i;
            }
        }
        let sign = if col[max_idx] < 0.0 { -1.0 } else { 1.0 };
        sign * col[c]
    })
}

/// Fit a machine on the rows of `y` with subspace dimension `n`.
///
/// Rows must be pairwise distinct; exact duplicates are rejected so callers
/// can apply their stable first-occurrence dedupe rule explicitly.
pub fn fit_kahm(y: &DataMatrix, n: usize) -> Result<KahmModel> {
    if let Some((first, second)) = y.find_duplicate_rows() {
        return Err(KahmError::DuplicateRows { first, second });
    }
    let encoding = pca_encoding(y, n)?;
    fit_kahm_with_encoding(y, encoding)
}

/// Fit without the distinct-rows check. Smoother iterates legitimately
/// collapse rows onto each other; K + λI stays positive definite, so the
/// machine remains well-defined.
pub(crate) fn fit_kahm_lenient(y: &DataMatrix, n: usize) -> Result<KahmModel> {
    let encoding = pca_encoding(y, n)?;
    fit_kahm_with_encoding(y, encoding)
}

pub(crate) fn fit_kahm_with_encoding(y: &DataMatrix, encoding: DMatrix<f64>) -> Result<KahmModel> {
    if y.n_rows() < 2 {
        return Err(KahmError::invalid("need at least 2 rows to fit"));
    }

    let projected = y.inner() * encoding.transpose();

    // θ = sample covariance of the projected rows, divisor N-1.
    let nrows = projected.nrows();
    let mean = projected.row_mean();
    let mut centered = projected.clone();
    for i in 0..nrows {
        for j in 0..projected.ncols() {
            centered[(i, j)] -= mean[j];
        }
    }
    let theta = centered.transpose() * &centered / (nrows as f64 - 1.0);
    let shape = KernelShape::from_covariance(theta)?;

    let gram = kernel_matrix(&projected, &shape);
    let fp = find_lambda_star(&gram, y.inner())?;
    let chol = regularized_cholesky(&gram, fp.lambda_star)?;
    let solve_op = if nrows <= EXPLICIT_INVERSE_LIMIT {
        SolveOp::Inverse(chol.inverse())
    } else {
        SolveOp::Factor(chol.l())
    };
    let whitened = shape.whiten_rows(&projected);

    Ok(KahmModel {
        y: y.clone(),
        encoding,
        shape,
        lambda_star: fp.lambda_star,
        solve_op,
        projected,
        whitened,
        gram,
    })
}

impl KahmModel {
    pub fn training_data(&self) -> &DataMatrix {
        &self.y
    }

    pub fn encoding(&self) -> &DMatrix<f64> {
        &self.encoding
    }

    pub fn shape(&self) -> &KernelShape {
        &self.shape
    }

    pub fn lambda_star(&self) -> f64 {
        self.lambda_star
    }

    pub fn solve_op(&self) -> &SolveOp {
        &self.solve_op
    }

    pub fn gram(&self) -> &KernelMatrix {
        &self.gram
    }

    pub fn subspace_dim(&self) -> usize {
        self.encoding.nrows()
    }

    pub fn ambient_dim(&self) -> usize {
        self.y.n_cols()
    }

    pub fn sample_count(&self) -> usize {
        self.y.n_rows()
    }

    pub(crate) fn rebuild(
        y: DataMatrix,
        encoding: DMatrix<f64>,
        theta: DMatrix<f64>,
        lambda_star: f64,
        solve_op: SolveOp,
    ) -> Result<KahmModel> {
        let shape = KernelShape::from_covariance(theta)?;
        let projected = y.inner() * encoding.transpose();
        let whitened = shape.whiten_rows(&projected);
        let gram = kernel_matrix(&projected, &shape);
        Ok(KahmModel { y, encoding, shape, lambda_star, solve_op, projected, whitened, gram })
    }

    /// Stabilized barycentric weights for an arbitrary point.
    ///
    /// The kernel vector is rescaled by exp(min q / 2) before the solve;
    /// both the numerator and the normalizing sum scale by the same positive
    /// constant, so the result is unchanged (scale invariance) while the sum
    /// stays representable far from the data.
    fn stabilized_weights(&self, y: &DVector<f64>) -> Result<DVector<f64>> {
        if y.len() != self.ambient_dim() {
            return Err(KahmError::DimensionMismatch(format!(
                "point of dim {} for model of dim {}",
                y.len(),
                self.ambient_dim()
            )));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(KahmError::invalid("non-finite evaluation point"));
        }
        let x = &self.encoding * y;
        let z = self.shape.whiten_vec(&x);

        let n = self.sample_count();
        let mut q = DVector::zeros(n);
        for i in 0..n {
            let mut acc = 0.0;
            for k in 0..z.len() {
                let d = z[k] - self.whitened[(i, k)];
                acc += d * d;
            }
            q[i] = acc;
        }
        let min_q = q.min();
        let kappa = q.map(|v| (-0.5 * (v - min_q)).exp());
        Ok(self.solve_op.apply_vec(&kappa))
    }

    /// Image of `y` under the machine: an affine combination of training rows.
    pub fn evaluate(&self, y: &DVector<f64>) -> Result<DVector<f64>> {
        let w = self.stabilized_weights(y)?;
        let denom: f64 = w.iter().sum();
        if !(denom.is_finite() && denom > 0.0) {
            return Err(KahmError::EvaluationUnderflow);
        }
        Ok(self.y.inner().transpose() * (w / denom))
    }

    /// Γ(y) = ‖y - 𝓐(y)‖.
    pub fn distance(&self, y: &DVector<f64>) -> Result<f64> {
        Ok((y - self.evaluate(y)?).norm())
    }

    /// Unstabilized dense evaluation straight from the defining formula.
    /// Test oracle for small instances; underflows far from the data.
    pub fn evaluate_dense_unstabilized(&self, y: &DVector<f64>) -> Result<DVector<f64>> {
        let x = &self.encoding * y;
        let n = self.sample_count();
        let mut kappa = DVector::zeros(n);
        for i in 0..n {
            let diff = &x - self.projected.row(i).transpose();
            kappa[i] = (-0.5 * self.shape.quad_form(&diff)).exp();
        }
        let w = self.solve_op.apply_vec(&kappa);
        let denom: f64 = w.iter().sum();
        if !(denom.is_finite() && denom != 0.0) {
            return Err(KahmError::EvaluationUnderflow);
        }
        Ok(self.y.inner().transpose() * (w / denom))
    }

    /// Membership-weight matrix H over the training rows: `H[j][i] = h^j(Py^i)`,
    /// i.e. H = (K + λ*I)⁻¹ K, symmetric with ‖H‖₂ < 1.
    pub fn membership_matrix(&self) -> DMatrix<f64> {
        self.solve_op.apply_mat(self.gram.inner())
    }

    /// Per-row reconstruction 𝓐(y^i) and membership sums Σ_j h^j(Py^i) for
    /// every training row, computed in one pass over the Gram matrix.
    pub fn reconstruct_training_rows(&self) -> (DMatrix<f64>, DVector<f64>) {
        let h = self.membership_matrix();
        let sums = DVector::from_fn(h.ncols(), |i, _| h.column(i).sum());
        let weighted = self.y.inner().transpose() * &h; // p×N, column i = Yᵀ H_{:,i}
        let recon = DMatrix::from_fn(self.sample_count(), self.ambient_dim(), |i, j| {
            weighted[(j, i)] / sums[i]
        });
        (recon, sums)
    }

    /// Spectrum-based bounds of the fitted machine.
    pub fn bound_certificate(&self) -> BoundCertificate {
        let (mu_min, mu_max) = self.gram.eigenvalue_range();
        let ratio_bound_tight = (self.lambda_star + mu_max) / (self.lambda_star + mu_min);
        let pn2 = self.ambient_dim() as f64 * (self.sample_count() as f64).powi(2);
        let ratio_bound_loose = 1.0 + pn2 / (2.0 * self.y.frob_sq());
        let spectral = self
            .y
            .inner()
            .clone()
            .singular_values()
            .max();
        BoundCertificate {
            ratio_bound_tight,
            ratio_bound_loose,
            norm_bound: spectral * ratio_bound_tight,
        }
    }
}
