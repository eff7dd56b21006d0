//! Dense linear algebra with the jitter policy shared by every model.
//!
//! Factorisations first try the matrix as given. If that fails, a diagonal
//! jitter starting at `base_jitter` is added and grown by a factor of ten,
//! up to [`MAX_JITTER_RETRIES`] times.

use nalgebra::{DMatrix, DVector};

use crate::error::{mismatch, Error, Result};

/// Base jitter for kernel Gram matrices.
pub const GRAM_JITTER: f64 = 1e-6;
/// Base jitter for small latent-algebra matrices (column covariances, Σ(x)).
pub const LATENT_JITTER: f64 = 1e-8;
pub const MAX_JITTER_RETRIES: usize = 6;

/// Lower Cholesky factor of `A + jitter_used·I`.
#[derive(Clone, Debug)]
pub struct CholeskyFactor {
    lower: DMatrix<f64>,
    jitter_used: f64,
}

impl CholeskyFactor {
    pub fn lower(&self) -> &DMatrix<f64> {
        &self.lower
    }

    pub fn jitter_used(&self) -> f64 {
        self.jitter_used
    }

    pub fn dim(&self) -> usize {
        self.lower.nrows()
    }

    /// Solves `(A + jitter·I) X = B`.
    pub fn solve(&self, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if b.nrows() != self.dim() {
            return Err(mismatch(format!(
                "factor is {0}x{0} but right-hand side has {1} rows",
                self.dim(),
                b.nrows()
            )));
        }
        let y = self
            .lower
            .solve_lower_triangular(b)
            .expect("cholesky diagonal is strictly positive");
        Ok(self
            .lower
            .tr_solve_lower_triangular(&y)
            .expect("cholesky diagonal is strictly positive"))
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> Result<DVector<f64>> {
        if b.len() != self.dim() {
            return Err(mismatch(format!(
                "factor is {0}x{0} but vector has length {1}",
                self.dim(),
                b.len()
            )));
        }
        let y = self
            .lower
            .solve_lower_triangular(b)
            .expect("cholesky diagonal is strictly positive");
        Ok(self
            .lower
            .tr_solve_lower_triangular(&y)
            .expect("cholesky diagonal is strictly positive"))
    }

    /// `L⁻¹ B`.
    pub fn solve_lower(&self, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if b.nrows() != self.dim() {
            return Err(mismatch("triangular solve: row count differs from factor"));
        }
        Ok(self
            .lower
            .solve_lower_triangular(b)
            .expect("cholesky diagonal is strictly positive"))
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        let n = self.dim();
        let inv = self
            .solve(&DMatrix::identity(n, n))
            .expect("identity conforms");
        symmetrize(&inv)
    }

    pub fn log_det(&self) -> f64 {
        2.0 * self.lower.diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    /// `L Lᵀ`, i.e. the factored matrix including jitter.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        &self.lower * self.lower.transpose()
    }
}

/// `(A + Aᵀ) / 2`.
pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

fn try_cholesky(a: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let chol = nalgebra::linalg::Cholesky::new(a.clone())?;
    let l = chol.unpack();
    if l.diagonal().iter().all(|d| d.is_finite() && *d > 0.0) {
        Some(l)
    } else {
        None
    }
}

/// Cholesky factorisation with escalating diagonal jitter.
pub fn cholesky_psd(a: &DMatrix<f64>, base_jitter: f64) -> Result<CholeskyFactor> {
    if a.nrows() != a.ncols() {
        return Err(mismatch(format!(
            "cholesky needs a square matrix, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    let sym = symmetrize(a);
    if let Some(lower) = try_cholesky(&sym) {
        return Ok(CholeskyFactor {
            lower,
            jitter_used: 0.0,
        });
    }
    let base = if base_jitter > 0.0 { base_jitter } else { GRAM_JITTER };
    let mut jitter = base;
    for _ in 0..=MAX_JITTER_RETRIES {
        let mut shifted = sym.clone();
        for i in 0..shifted.nrows() {
            shifted[(i, i)] += jitter;
        }
        if let Some(lower) = try_cholesky(&shifted) {
            return Ok(CholeskyFactor {
                lower,
                jitter_used: jitter,
            });
        }
        jitter *= 10.0;
    }
    Err(Error::NotPositiveDefinite {
        jitter: jitter / 10.0,
    })
}

pub fn solve_chol(factor: &CholeskyFactor, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    factor.solve(b)
}

pub fn log_det_chol(factor: &CholeskyFactor) -> f64 {
    factor.log_det()
}

/// Kronecker product with the standard block layout.
pub fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    a.kronecker(b)
}

/// Column-stacking `vec` operator.
pub fn vec_cols(a: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(a.as_slice())
}

/// Inverse of [`vec_cols`].
pub fn unvec_cols(v: &DVector<f64>, nrows: usize, ncols: usize) -> Result<DMatrix<f64>> {
    if v.len() != nrows * ncols {
        return Err(mismatch(format!(
            "cannot reshape length {} into {}x{}",
            v.len(),
            nrows,
            ncols
        )));
    }
    Ok(DMatrix::from_column_slice(nrows, ncols, v.as_slice()))
}

/// Mean of a zero-mean Gaussian conditioned on `values` observed at the
/// factored inputs: `K_*x K_xx⁻¹ values`.
pub fn gaussian_cond_mean(
    k_star_x: &DMatrix<f64>,
    f_xx: &CholeskyFactor,
    values: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    if k_star_x.ncols() != f_xx.dim() {
        return Err(mismatch(format!(
            "cross-covariance has {} columns, factor is {}x{}",
            k_star_x.ncols(),
            f_xx.dim(),
            f_xx.dim()
        )));
    }
    let weights = f_xx.solve(values)?;
    Ok(k_star_x * weights)
}

/// Symmetric square root `Q diag(√max(λ,0))` of a PSD matrix, exact zero for
/// a zero matrix.
pub fn psd_sqrt(a: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = symmetrize(a).symmetric_eigen();
    let mut q = eig.eigenvectors;
    for (j, lambda) in eig.eigenvalues.iter().enumerate() {
        let s = lambda.max(0.0).sqrt();
        q.column_mut(j).scale_mut(s);
    }
    q
}
