//! Brute-force check of the Gaussian-product integral behind the MGK exponent.

use nalgebra::DMatrix;

use crate::error::{mismatch, Error, Result};
use crate::linalg::{cholesky_psd, LATENT_JITTER};

/// Tensor-product trapezoid grid centred on the integrand's mode.
#[derive(Clone, Copy, Debug)]
pub struct QuadratureGrid {
    pub points_per_dim: usize,
    /// Half-width of the box in standard deviations of the integrand.
    pub half_width_sd: f64,
}

impl Default for QuadratureGrid {
    fn default() -> Self {
        Self {
            points_per_dim: 81,
            half_width_sd: 8.0,
        }
    }
}

const REFINEMENT_TOL: f64 = 1e-6;

/// Integrates `exp{-(xi-a)ᵀΣi⁻¹(xi-a) - (xj-a)ᵀΣj⁻¹(xj-a)}` over `a` on a
/// grid and divides by `π^{D/2} |Σi⁻¹+Σj⁻¹|^{-1/2}`.
///
/// Under the no-½ convention the ratio equals `exp{-dᵀ(Σi+Σj)⁻¹d}`, the
/// exponent of [`k_mgk`](super::k_mgk). Only `D ≤ 2` is supported.
pub fn mgk_integral(
    xi: &[f64],
    xj: &[f64],
    sigma_i: &DMatrix<f64>,
    sigma_j: &DMatrix<f64>,
    grid: &QuadratureGrid,
) -> Result<f64> {
    let d = xi.len();
    if d == 0 || d > 2 {
        return Err(mismatch(format!("quadrature check supports D ≤ 2, got {d}")));
    }
    if xj.len() != d || sigma_i.shape() != (d, d) || sigma_j.shape() != (d, d) {
        return Err(mismatch("quadrature inputs disagree in dimension"));
    }
    if grid.points_per_dim < 3 || grid.half_width_sd < 4.0 {
        return Err(Error::InvalidConfig(
            "quadrature grid needs ≥ 3 points per axis and a half-width of ≥ 4 standard deviations".into(),
        ));
    }
    let a = cholesky_psd(sigma_i, LATENT_JITTER)?.inverse();
    let b = cholesky_psd(sigma_j, LATENT_JITTER)?.inverse();
    let precision = &a + &b;
    let prec_factor = cholesky_psd(&precision, LATENT_JITTER)?;
    let vi = nalgebra::DVector::from_column_slice(xi);
    let vj = nalgebra::DVector::from_column_slice(xj);
    let centre = prec_factor.solve_vec(&(&a * &vi + &b * &vj))?;
    // Integrand is exp(-(a-c)ᵀP(a-c)) up to a constant, i.e. covariance (2P)⁻¹.
    let cov = prec_factor.inverse() * 0.5;
    let sd: Vec<f64> = (0..d).map(|k| cov[(k, k)].sqrt()).collect();

    let integrand = |pt: &[f64]| -> f64 {
        let mut q = 0.0;
        for (m, x) in [(&a, xi), (&b, xj)] {
            for r in 0..d {
                for c in 0..d {
                    q += (x[r] - pt[r]) * m[(r, c)] * (x[c] - pt[c]);
                }
            }
        }
        (-q).exp()
    };

    let integrate = |n: usize| -> f64 {
        let axes: Vec<Vec<(f64, f64)>> = (0..d)
            .map(|k| {
                let lo = centre[k] - grid.half_width_sd * sd[k];
                let h = 2.0 * grid.half_width_sd * sd[k] / (n - 1) as f64;
                (0..n)
                    .map(|t| {
                        let w = if t == 0 || t == n - 1 { 0.5 * h } else { h };
                        (lo + t as f64 * h, w)
                    })
                    .collect()
            })
            .collect();
        match d {
            1 => axes[0].iter().map(|&(x, w)| w * integrand(&[x])).sum(),
            _ => {
                let mut total = 0.0;
                for &(x0, w0) in &axes[0] {
                    for &(x1, w1) in &axes[1] {
                        total += w0 * w1 * integrand(&[x0, x1]);
                    }
                }
                total
            }
        }
    };

    let normaliser = std::f64::consts::PI.powf(d as f64 / 2.0) * (-0.5 * prec_factor.log_det()).exp();
    let coarse = integrate(grid.points_per_dim) / normaliser;
    let fine = integrate(2 * grid.points_per_dim - 1) / normaliser;
    let change = (fine - coarse).abs();
    if change > REFINEMENT_TOL {
        return Err(Error::GridTooCoarse { change });
    }
    Ok(fine)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn coincident_inputs_give_one() {
        let s = DMatrix::from_row_slice(2, 2, &[1.2, 0.3, 0.3, 0.8]);
        let v = mgk_integral(&[0.5, -0.2], &[0.5, -0.2], &s, &s, &QuadratureGrid::default()).unwrap();
        assert_relative_eq!(v, 1.0, epsilon = 1e-9);
    }

    #[test]
    fn one_dimensional_unit_case() {
        let one = DMatrix::from_element(1, 1, 1.0);
        let v = mgk_integral(&[0.0], &[1.0], &one, &one, &QuadratureGrid::default()).unwrap();
        assert_relative_eq!(v, (-0.5f64).exp(), epsilon = 1e-9);
    }

    #[test]
    fn coarse_grid_is_rejected() {
        let one = DMatrix::from_element(1, 1, 1.0);
        let grid = QuadratureGrid {
            points_per_dim: 4,
            half_width_sd: 8.0,
        };
        assert!(matches!(
            mgk_integral(&[0.0], &[1.0], &one, &one, &grid),
            Err(Error::GridTooCoarse { .. })
        ));
    }

    #[test]
    fn three_dimensions_rejected() {
        let s = DMatrix::identity(3, 3);
        assert!(mgk_integral(&[0.0; 3], &[0.0; 3], &s, &s, &QuadratureGrid::default()).is_err());
    }
}
