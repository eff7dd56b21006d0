//! Pointwise covariance functions and their partial derivatives.
//!
//! Gradient routines add `weight · ∂k/∂(·)` into caller-provided slices, so a
//! composite kernel can push its upstream adjoint straight through.

use std::f64::consts::PI;

use nalgebra::DMatrix;

use crate::error::{mismatch, Error, Result};

/// Log-lengthscales are clamped to this magnitude before exponentiation.
pub const LOG_LENGTHSCALE_CLAMP: f64 = 20.0;

pub(crate) fn clamp_log(v: f64) -> f64 {
    v.clamp(-LOG_LENGTHSCALE_CLAMP, LOG_LENGTHSCALE_CLAMP)
}

/// Squared-exponential ARD kernel `σ² exp(-½ Σ_d (x_d - x'_d)² / ℓ_d²)`.
pub fn k_se_ard(xi: &[f64], xj: &[f64], signal_variance: f64, lengthscales: &[f64]) -> Result<f64> {
    if xi.len() != lengthscales.len() || xj.len() != lengthscales.len() {
        return Err(mismatch(format!(
            "SE-ARD: inputs of dimension {}/{} with {} lengthscales",
            xi.len(),
            xj.len(),
            lengthscales.len()
        )));
    }
    if let Some(&l) = lengthscales.iter().find(|l| !(**l > 0.0 && l.is_finite())) {
        return Err(Error::NonPositiveLengthscale(l));
    }
    let q: f64 = xi
        .iter()
        .zip(xj)
        .zip(lengthscales)
        .map(|((a, b), l)| {
            let r = (a - b) / l;
            r * r
        })
        .sum();
    Ok(signal_variance * (-0.5 * q).exp())
}

/// Periodic kernel `σ² exp(-2 sin²(π|x - x'|/p) / ℓ²)` on scalar inputs.
pub fn k_periodic(xi: f64, xj: f64, signal_variance: f64, lengthscale: f64, period: f64) -> f64 {
    let s = (PI * (xi - xj).abs() / period).sin();
    signal_variance * (-2.0 * s * s / (lengthscale * lengthscale)).exp()
}

/// Factorised Gibbs kernel with per-dimension lengthscales evaluated at each input.
pub fn k_fgk(xi: &[f64], xj: &[f64], li: &[f64], lj: &[f64]) -> Result<f64> {
    let d = xi.len();
    if xj.len() != d || li.len() != d || lj.len() != d {
        return Err(mismatch("FGK: inputs and lengthscales must share one dimension"));
    }
    if let Some(&l) = li
        .iter()
        .chain(lj)
        .find(|l| !(**l > 0.0 && l.is_finite()))
    {
        return Err(Error::NonPositiveLengthscale(l));
    }
    let mut log_k = 0.0;
    for k in 0..d {
        let s = li[k] * li[k] + lj[k] * lj[k];
        let r = xi[k] - xj[k];
        log_k += 0.5 * (2.0 * li[k] * lj[k] / s).ln() - r * r / s;
    }
    Ok(log_k.exp())
}

/// Multivariate Gibbs kernel driven by input-dependent covariance matrices.
///
/// Uses the sum form `|Σi|^¼ |Σj|^¼ |(Σi+Σj)/2|^-½ exp(-dᵀ(Σi+Σj)⁻¹d)`, which
/// coincides with [`k_fgk`] when both matrices are diagonal.
pub fn k_mgk(xi: &[f64], xj: &[f64], sigma_i: &DMatrix<f64>, sigma_j: &DMatrix<f64>) -> Result<f64> {
    let d = xi.len();
    if xj.len() != d || sigma_i.shape() != (d, d) || sigma_j.shape() != (d, d) {
        return Err(mismatch("MGK: inputs and covariance matrices must share one dimension"));
    }
    mgk_value(xi, xj, sigma_i.as_slice(), sigma_j.as_slice())
        .ok_or(Error::NotPositiveDefinite { jitter: 0.0 })
}

// ---------------------------------------------------------------------------
// Small dense helpers for D×D blocks stored column-major (symmetric here, so
// row/column order coincide).

/// In-place Cholesky of a small SPD matrix. Returns the lower factor.
fn small_cholesky(a: &[f64], d: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; d * d];
    for j in 0..d {
        let mut diag = a[j * d + j];
        for k in 0..j {
            diag -= l[j * d + k] * l[j * d + k];
        }
        if !(diag > 0.0) || !diag.is_finite() {
            return None;
        }
        let ljj = diag.sqrt();
        l[j * d + j] = ljj;
        for i in (j + 1)..d {
            let mut v = a[i * d + j];
            for k in 0..j {
                v -= l[i * d + k] * l[j * d + k];
            }
            l[i * d + j] = v / ljj;
        }
    }
    Some(l)
}

fn small_log_det(l: &[f64], d: usize) -> f64 {
    (0..d).map(|i| l[i * d + i].ln()).sum::<f64>() * 2.0
}

/// Solves `L Lᵀ x = b` for one right-hand side.
fn small_solve(l: &[f64], d: usize, b: &[f64]) -> Vec<f64> {
    let mut y = b.to_vec();
    for i in 0..d {
        for k in 0..i {
            y[i] -= l[i * d + k] * y[k];
        }
        y[i] /= l[i * d + i];
    }
    for i in (0..d).rev() {
        for k in (i + 1)..d {
            y[i] -= l[k * d + i] * y[k];
        }
        y[i] /= l[i * d + i];
    }
    y
}

fn small_inverse(l: &[f64], d: usize) -> Vec<f64> {
    let mut inv = vec![0.0; d * d];
    let mut e = vec![0.0; d];
    for c in 0..d {
        e.iter_mut().for_each(|v| *v = 0.0);
        e[c] = 1.0;
        let col = small_solve(l, d, &e);
        for r in 0..d {
            inv[r * d + c] = col[r];
        }
    }
    inv
}

struct MgkParts {
    value: f64,
    /// (Σi+Σj)⁻¹
    s_inv: Vec<f64>,
    /// (Σi+Σj)⁻¹ d
    s_inv_d: Vec<f64>,
    sigma_i_inv: Vec<f64>,
    sigma_j_inv: Vec<f64>,
}

fn mgk_parts(xi: &[f64], xj: &[f64], si: &[f64], sj: &[f64], need_inverses: bool) -> Option<MgkParts> {
    let d = xi.len();
    let s: Vec<f64> = si.iter().zip(sj).map(|(a, b)| a + b).collect();
    let li = small_cholesky(si, d)?;
    let lj = small_cholesky(sj, d)?;
    let ls = small_cholesky(&s, d)?;
    let diff: Vec<f64> = xi.iter().zip(xj).map(|(a, b)| a - b).collect();
    let s_inv_d = small_solve(&ls, d, &diff);
    let quad: f64 = diff.iter().zip(&s_inv_d).map(|(a, b)| a * b).sum();
    // |S/2| = |S| / 2^d
    let log_half_s = small_log_det(&ls, d) - d as f64 * std::f64::consts::LN_2;
    let log_k = 0.25 * small_log_det(&li, d) + 0.25 * small_log_det(&lj, d) - 0.5 * log_half_s - quad;
    let (s_inv, sigma_i_inv, sigma_j_inv) = if need_inverses {
        (
            small_inverse(&ls, d),
            small_inverse(&li, d),
            small_inverse(&lj, d),
        )
    } else {
        (Vec::new(), Vec::new(), Vec::new())
    };
    Some(MgkParts {
        value: log_k.exp(),
        s_inv,
        s_inv_d,
        sigma_i_inv,
        sigma_j_inv,
    })
}

pub(crate) fn mgk_value(xi: &[f64], xj: &[f64], si: &[f64], sj: &[f64]) -> Option<f64> {
    mgk_parts(xi, xj, si, sj, false).map(|p| p.value)
}

/// Adds `w·∂k/∂x` and `w·∂k/∂Σ` for the MGK. The Σ gradients are full
/// (unsymmetrised) D×D adjoints.
pub(crate) fn mgk_grad(
    xi: &[f64],
    xj: &[f64],
    si: &[f64],
    sj: &[f64],
    w: f64,
    dxi: &mut [f64],
    dxj: &mut [f64],
    dsi: &mut [f64],
    dsj: &mut [f64],
) -> Option<()> {
    let d = xi.len();
    let p = mgk_parts(xi, xj, si, sj, true)?;
    let wk = w * p.value;
    for a in 0..d {
        let g = -2.0 * wk * p.s_inv_d[a];
        dxi[a] += g;
        dxj[a] -= g;
    }
    // ∂log k/∂Σi = ¼Σi⁻¹ - ½S⁻¹ + S⁻¹ddᵀS⁻¹ (same for Σj with Σj⁻¹).
    for a in 0..d {
        for b in 0..d {
            let shared = -0.5 * p.s_inv[a * d + b] + p.s_inv_d[a] * p.s_inv_d[b];
            dsi[a * d + b] += wk * (0.25 * p.sigma_i_inv[a * d + b] + shared);
            dsj[a * d + b] += wk * (0.25 * p.sigma_j_inv[a * d + b] + shared);
        }
    }
    Some(())
}

/// Adds `w·∂k/∂x` and `w·∂k/∂log ℓ` for the FGK given log-lengthscales.
pub(crate) fn fgk_value_logs(xi: &[f64], xj: &[f64], log_li: &[f64], log_lj: &[f64]) -> f64 {
    let mut log_k = 0.0;
    for k in 0..xi.len() {
        let li = clamp_log(log_li[k]).exp();
        let lj = clamp_log(log_lj[k]).exp();
        let s = li * li + lj * lj;
        let r = xi[k] - xj[k];
        log_k += 0.5 * (2.0 * li * lj / s).ln() - r * r / s;
    }
    log_k.exp()
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn fgk_grad_logs(
    xi: &[f64],
    xj: &[f64],
    log_li: &[f64],
    log_lj: &[f64],
    w: f64,
    dxi: &mut [f64],
    dxj: &mut [f64],
    dli: &mut [f64],
    dlj: &mut [f64],
) {
    let wk = w * fgk_value_logs(xi, xj, log_li, log_lj);
    for k in 0..xi.len() {
        let li = clamp_log(log_li[k]).exp();
        let lj = clamp_log(log_lj[k]).exp();
        let li2 = li * li;
        let lj2 = lj * lj;
        let s = li2 + lj2;
        let r = xi[k] - xj[k];
        let gx = -2.0 * r / s * wk;
        dxi[k] += gx;
        dxj[k] -= gx;
        let r2s2 = 2.0 * r * r / (s * s);
        // Beyond the clamp the value is flat in the raw log-lengthscale.
        if log_li[k].abs() < LOG_LENGTHSCALE_CLAMP {
            dli[k] += wk * (0.5 - li2 / s + r2s2 * li2);
        }
        if log_lj[k].abs() < LOG_LENGTHSCALE_CLAMP {
            dlj[k] += wk * (0.5 - lj2 / s + r2s2 * lj2);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn se_ard_examples() {
        assert_eq!(k_se_ard(&[0.3, 1.0], &[0.3, 1.0], 2.5, &[1.0, 2.0]).unwrap(), 2.5);
        let v = k_se_ard(&[0.0], &[2f64.sqrt()], 1.0, &[1.0]).unwrap();
        assert_relative_eq!(v, (-1.0f64).exp(), epsilon = 1e-15);
        assert_relative_eq!(v, 0.36788, epsilon = 1e-5);
        let pruned = k_se_ard(&[0.0, 0.0], &[0.0, 3.0], 1.7, &[1.0, 1e6]).unwrap();
        assert_relative_eq!(pruned, 1.7, epsilon = 1e-10);
        assert!(matches!(
            k_se_ard(&[0.0], &[0.0, 1.0], 1.0, &[1.0]),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn periodic_examples() {
        assert_eq!(k_periodic(1.2, 1.2, 0.8, 0.5, 3.0), 0.8);
        assert_relative_eq!(k_periodic(0.0, 3.0, 0.8, 0.5, 3.0), 0.8, epsilon = 1e-12);
        let half = k_periodic(0.0, 1.5, 1.0, 1.0, 3.0);
        assert_relative_eq!(half, (-2.0f64).exp(), epsilon = 1e-15);
        assert_relative_eq!(half, 0.13534, epsilon = 1e-5);
    }

    #[test]
    fn fgk_examples() {
        let xi = [0.2, -1.0];
        let xj = [1.1, 0.4];
        let l = [0.7, 1.9];
        let fgk = k_fgk(&xi, &xj, &l, &l).unwrap();
        let se = k_se_ard(&xi, &xj, 1.0, &l).unwrap();
        assert_relative_eq!(fgk, se, epsilon = 1e-15);

        let v = k_fgk(&[0.0], &[1.0], &[1.0], &[3f64.sqrt()]).unwrap();
        // √(2√3/4)·e^(-1/4)
        let expected = (2.0 * 3f64.sqrt() / 4.0).sqrt() * (-0.25f64).exp();
        assert_relative_eq!(v, expected, epsilon = 1e-15);
        assert_relative_eq!(v, 0.72476, epsilon = 1e-5);

        assert!(k_fgk(&[0.0], &[0.5], &[1.3], &[1.3]).unwrap() < 1.0);
        assert!(matches!(
            k_fgk(&[0.0], &[0.5], &[0.0], &[1.0]),
            Err(Error::NonPositiveLengthscale(_))
        ));
    }

    #[test]
    fn mgk_examples() {
        let id = DMatrix::identity(2, 2);
        let v = k_mgk(&[1.0, 0.0], &[0.0, 0.0], &id, &id).unwrap();
        assert_relative_eq!(v, (-0.5f64).exp(), epsilon = 1e-15);
        assert_relative_eq!(v, 0.60653, epsilon = 1e-5);

        let s = DMatrix::from_row_slice(2, 2, &[2.0, 0.6, 0.6, 1.0]);
        assert_relative_eq!(k_mgk(&[0.4, 0.1], &[0.4, 0.1], &s, &s).unwrap(), 1.0, epsilon = 1e-14);

        let bad = DMatrix::from_row_slice(2, 2, &[-1.0, 0.0, 0.0, -1.0]);
        assert!(k_mgk(&[0.0, 0.0], &[1.0, 0.0], &bad, &bad).is_err());
    }

    #[test]
    fn fgk_log_form_matches_public_form() {
        let xi = [0.2, -1.0];
        let xj = [1.1, 0.4];
        let li = [0.7f64, 1.9];
        let lj = [1.3f64, 0.4];
        let logs_i: Vec<f64> = li.iter().map(|l| l.ln()).collect();
        let logs_j: Vec<f64> = lj.iter().map(|l| l.ln()).collect();
        assert_relative_eq!(
            fgk_value_logs(&xi, &xj, &logs_i, &logs_j),
            k_fgk(&xi, &xj, &li, &lj).unwrap(),
            epsilon = 1e-14
        );
    }

    fn central<F: Fn(&[f64]) -> f64>(f: F, x: &[f64], i: usize) -> f64 {
        let h = 1e-6;
        let mut p = x.to_vec();
        let mut m = x.to_vec();
        p[i] += h;
        m[i] -= h;
        (f(&p) - f(&m)) / (2.0 * h)
    }

    #[test]
    fn fgk_gradients_match_differences() {
        let xi = [0.2, -1.0];
        let xj = [1.1, 0.4];
        let li = [-0.3, 0.5];
        let lj = [0.2, -0.8];
        let mut dxi = [0.0; 2];
        let mut dxj = [0.0; 2];
        let mut dli = [0.0; 2];
        let mut dlj = [0.0; 2];
        fgk_grad_logs(&xi, &xj, &li, &lj, 1.0, &mut dxi, &mut dxj, &mut dli, &mut dlj);
        for k in 0..2 {
            assert_relative_eq!(dxi[k], central(|v| fgk_value_logs(v, &xj, &li, &lj), &xi, k), epsilon = 1e-8);
            assert_relative_eq!(dxj[k], central(|v| fgk_value_logs(&xi, v, &li, &lj), &xj, k), epsilon = 1e-8);
            assert_relative_eq!(dli[k], central(|v| fgk_value_logs(&xi, &xj, v, &lj), &li, k), epsilon = 1e-8);
            assert_relative_eq!(dlj[k], central(|v| fgk_value_logs(&xi, &xj, &li, v), &lj, k), epsilon = 1e-8);
        }
    }

    #[test]
    fn mgk_gradients_match_differences() {
        let xi = [0.2, -1.0];
        let xj = [1.1, 0.4];
        let si = [1.5, 0.3, 0.3, 0.9];
        let sj = [0.7, -0.2, -0.2, 1.2];
        let mut dxi = [0.0; 2];
        let mut dxj = [0.0; 2];
        let mut dsi = [0.0; 4];
        let mut dsj = [0.0; 4];
        mgk_grad(&xi, &xj, &si, &sj, 1.0, &mut dxi, &mut dxj, &mut dsi, &mut dsj).unwrap();
        for k in 0..2 {
            assert_relative_eq!(dxi[k], central(|v| mgk_value(v, &xj, &si, &sj).unwrap(), &xi, k), epsilon = 1e-8);
            assert_relative_eq!(dxj[k], central(|v| mgk_value(&xi, v, &si, &sj).unwrap(), &xj, k), epsilon = 1e-8);
        }
        // Symmetric perturbations: compare the symmetrised adjoint.
        for (a, b) in [(0usize, 0usize), (0, 1), (1, 1)] {
            let f = |eps: f64| {
                let mut s = si;
                s[a * 2 + b] += eps;
                if a != b {
                    s[b * 2 + a] += eps;
                }
                mgk_value(&xi, &xj, &s, &sj).unwrap()
            };
            let h = 1e-6;
            let numeric = (f(h) - f(-h)) / (2.0 * h);
            let analytic = if a == b { dsi[a * 2 + b] } else { dsi[a * 2 + b] + dsi[b * 2 + a] };
            assert_relative_eq!(analytic, numeric, epsilon = 1e-8);
        }
    }
}
