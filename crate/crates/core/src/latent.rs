//! Latent Gaussian-process fields that drive the Gibbs kernels.
//!
//! A [`LatentField`] stores an `N×P` matrix of latent values at anchor inputs
//! together with a matrix-normal prior `MN(μ, K_a, Ψ)`, where `K_a` is a
//! fixed SE-ARD kernel over (a subset of) the input columns.
//!
//! * Lengthscale fields hold per-dimension log-lengthscales `log ℓ_d(x)`
//!   with `Ψ = I` and prior mean `μ_ℓ`.
//! * Matrix fields hold the rows `h(x)` of `H` (mean zero, column covariance
//!   `Ψ_h`) and map each row to `Σ(x) = softplus{(h hᵀ)∘²} + Ω`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{mismatch, Error, Result};
use crate::kernels::{clamp_log, gram, KernelSpec, LatentKind, LatentRows};
use crate::linalg::{
    cholesky_psd, gaussian_cond_mean, kron, psd_sqrt, unvec_cols, vec_cols, CholeskyFactor, GRAM_JITTER,
    LATENT_JITTER,
};
use crate::points::Points;
use crate::rng::substream;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Inverse of [`softplus`] for positive arguments.
pub fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

/// `Σ = softplus{(h hᵀ)∘²} + diag(Ω)` with the square and softplus taken elementwise.
pub fn sigma_from_h(h_row: &[f64], omega: &[f64]) -> DMatrix<f64> {
    let d = h_row.len();
    DMatrix::from_fn(d, d, |a, b| {
        let v = softplus((h_row[a] * h_row[b]).powi(2));
        if a == b {
            v + omega[a]
        } else {
            v
        }
    })
}

/// Pulls `∂L/∂Σ` (row-major, `D×D`) back to `∂L/∂h` and `∂L/∂Ω`.
fn sigma_backward(h_row: &[f64], d_sigma: &[f64], dh: &mut [f64], d_omega: &mut [f64]) {
    let d = h_row.len();
    for a in 0..d {
        for b in 0..d {
            let g = d_sigma[a * d + b];
            if g == 0.0 {
                continue;
            }
            let ha2 = h_row[a] * h_row[a];
            let hb2 = h_row[b] * h_row[b];
            let s = g * sigmoid(ha2 * hb2);
            dh[a] += s * 2.0 * h_row[a] * hb2;
            dh[b] += s * 2.0 * ha2 * h_row[b];
            if a == b {
                d_omega[a] += g;
            }
        }
    }
}

/// Log density of `vec(H) ~ N(0, Ψ ⊗ K)`, i.e. `H ~ MN(0, K, Ψ)`.
pub fn matnorm_logpdf(h: &DMatrix<f64>, k_rows: &DMatrix<f64>, psi: &DMatrix<f64>) -> Result<f64> {
    let fk = cholesky_psd(k_rows, GRAM_JITTER)?;
    let fp = cholesky_psd(psi, LATENT_JITTER)?;
    Ok(matnorm_parts(h, &fk, &fp)?.value)
}

pub(crate) struct MatnormParts {
    pub value: f64,
    /// `K⁻¹ H Ψ⁻¹`; the gradient with respect to `H` is its negative.
    pub kinv_h_psiinv: DMatrix<f64>,
}

pub(crate) fn matnorm_parts(h: &DMatrix<f64>, fk: &CholeskyFactor, fp: &CholeskyFactor) -> Result<MatnormParts> {
    let (n, d) = h.shape();
    if fk.dim() != n || fp.dim() != d {
        return Err(mismatch(format!(
            "matrix-normal: H is {n}x{d}, row covariance {}x{0}, column covariance {}x{1}",
            fk.dim(),
            fp.dim()
        )));
    }
    let kinv_h = fk.solve(h)?;
    let kinv_h_psiinv = fp.solve(&kinv_h.transpose())?.transpose();
    let trace = h.component_mul(&kinv_h_psiinv).sum();
    let value = -0.5 * (n * d) as f64 * LN_2PI - 0.5 * d as f64 * fk.log_det() - 0.5 * n as f64 * fp.log_det()
        - 0.5 * trace;
    Ok(MatnormParts { value, kinv_h_psiinv })
}

/// Fixed prior over a latent field.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldPrior {
    /// Input columns the prior kernel reads.
    pub field_dims: Vec<usize>,
    pub lengthscales: Vec<f64>,
    pub variance: f64,
    /// Prior mean of every latent value (μ_ℓ for lengthscale fields, 0 for H).
    pub mean: f64,
    /// Column covariance Ψ (P×P).
    #[serde(with = "crate::serde_matrix")]
    pub column_covariance: DMatrix<f64>,
}

impl FieldPrior {
    /// Defaults for inputs `x`: SE lengthscale at 20% of each field column's
    /// range, unit variance, and the given mean and column covariance.
    pub fn with_range_defaults(x: &Points, field_dims: Vec<usize>, mean: f64, column_covariance: DMatrix<f64>) -> Self {
        let bounds = x.bounds();
        let lengthscales = field_dims
            .iter()
            .map(|&d| {
                let (lo, hi) = bounds.get(d).copied().unwrap_or((0.0, 1.0));
                let range = hi - lo;
                if range.is_finite() && range > 0.0 {
                    0.2 * range
                } else {
                    1.0
                }
            })
            .collect();
        Self {
            field_dims,
            lengthscales,
            variance: 1.0,
            mean,
            column_covariance,
        }
    }

    /// Default lengthscale-field prior: `μ_ℓ = log(median pairwise distance)`
    /// over the field columns and `Ψ = I`.
    pub fn lengthscale_default(x: &Points, field_dims: Vec<usize>, p: usize) -> Result<Self> {
        let mean = x.columns(&field_dims)?.median_pairwise_distance().max(1e-12).ln();
        Ok(Self::with_range_defaults(x, field_dims, mean, DMatrix::identity(p, p)))
    }

    /// Default matrix-field prior: zero mean and `Ψ = I`.
    pub fn matrix_default(x: &Points, field_dims: Vec<usize>, p: usize) -> Self {
        Self::with_range_defaults(x, field_dims, 0.0, DMatrix::identity(p, p))
    }

    /// Stationary SE-ARD kernel `K_a` of the prior.
    pub fn kernel(&self) -> KernelSpec {
        KernelSpec::se_ard(self.variance, self.lengthscales.clone(), self.field_dims.clone())
    }

    pub fn validate(&self, input_dim: usize, p: usize) -> Result<()> {
        self.kernel().validate(input_dim)?;
        if self.column_covariance.shape() != (p, p) {
            return Err(Error::InvalidConfig(format!(
                "field column covariance must be {p}x{p}, got {}x{}",
                self.column_covariance.nrows(),
                self.column_covariance.ncols()
            )));
        }
        if !self.mean.is_finite() {
            return Err(Error::InvalidConfig("field prior mean must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum FieldKind {
    /// Values are log-lengthscales (FGK).
    Lengthscale,
    /// Values are rows of H (MGK); `omega` is the shared positive diagonal Ω.
    Matrix { omega: Vec<f64> },
}

/// A latent field snapshot: values at anchor inputs plus its prior.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentField {
    pub kind: FieldKind,
    pub anchors: Points,
    #[serde(with = "crate::serde_matrix")]
    pub values: DMatrix<f64>,
    pub prior: FieldPrior,
}

impl LatentField {
    pub fn lengthscale(anchors: Points, log_values: DMatrix<f64>, prior: FieldPrior) -> Result<Self> {
        let f = Self {
            kind: FieldKind::Lengthscale,
            anchors,
            values: log_values,
            prior,
        };
        f.check()?;
        Ok(f)
    }

    pub fn matrix(anchors: Points, h: DMatrix<f64>, omega: Vec<f64>, prior: FieldPrior) -> Result<Self> {
        if let Some(&o) = omega.iter().find(|o| !(**o > 0.0 && o.is_finite())) {
            return Err(Error::InvalidConfig(format!("Ω entries must be positive, got {o}")));
        }
        let f = Self {
            kind: FieldKind::Matrix { omega },
            anchors,
            values: h,
            prior,
        };
        f.check()?;
        Ok(f)
    }

    /// Lengthscale field at its prior mean.
    pub fn lengthscale_at_prior_mean(anchors: Points, p: usize, prior: FieldPrior) -> Result<Self> {
        let n = anchors.len();
        let values = DMatrix::from_element(n, p, prior.mean);
        Self::lengthscale(anchors, values, prior)
    }

    /// Matrix field with `H` drawn i.i.d. `N(0, scale²)` and `Ω = omega0`.
    pub fn matrix_random_init(
        anchors: Points,
        p: usize,
        prior: FieldPrior,
        scale: f64,
        omega0: f64,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = substream(seed, "latent-init");
        let n = anchors.len();
        let h = DMatrix::from_fn(n, p, |_, _| scale * rng.sample::<f64, _>(StandardNormal));
        Self::matrix(anchors, h, vec![omega0; p], prior)
    }

    fn check(&self) -> Result<()> {
        if self.values.nrows() != self.anchors.len() {
            return Err(mismatch(format!(
                "{} latent rows for {} anchors",
                self.values.nrows(),
                self.anchors.len()
            )));
        }
        if let FieldKind::Matrix { omega } = &self.kind {
            if omega.len() != self.values.ncols() {
                return Err(mismatch("Ω length must equal the number of H columns"));
            }
        }
        self.prior.validate(self.anchors.dim(), self.p())
    }

    pub fn p(&self) -> usize {
        self.values.ncols()
    }

    pub fn latent_kind(&self) -> LatentKind {
        match self.kind {
            FieldKind::Lengthscale => LatentKind::LogLengthscale,
            FieldKind::Matrix { .. } => LatentKind::Covariance,
        }
    }

    pub fn omega(&self) -> Option<&[f64]> {
        match &self.kind {
            FieldKind::Matrix { omega } => Some(omega),
            FieldKind::Lengthscale => None,
        }
    }

    /// Kernel-facing latent rows for a matrix of field values (one row per input).
    pub fn features(&self, values: &DMatrix<f64>) -> LatentRows {
        let p = values.ncols();
        match &self.kind {
            FieldKind::Lengthscale => {
                let mut data = Vec::with_capacity(values.len());
                for i in 0..values.nrows() {
                    data.extend(values.row(i).iter().copied());
                }
                LatentRows::log_lengthscales(p, data).expect("width p")
            }
            FieldKind::Matrix { omega } => {
                let mut data = Vec::with_capacity(values.nrows() * p * p);
                for i in 0..values.nrows() {
                    let h: Vec<f64> = values.row(i).iter().copied().collect();
                    let s = sigma_from_h(&h, omega);
                    for a in 0..p {
                        for b in 0..p {
                            data.push(s[(a, b)]);
                        }
                    }
                }
                LatentRows::covariances(p, data).expect("width p²")
            }
        }
    }

    /// Pulls gradients on [`features`](Self::features) back to the field
    /// values and, for matrix fields, to Ω (natural scale).
    pub fn features_backward(&self, values: &DMatrix<f64>, d_features: &[f64]) -> (DMatrix<f64>, Vec<f64>) {
        let (n, p) = values.shape();
        match &self.kind {
            FieldKind::Lengthscale => (DMatrix::from_row_slice(n, p, d_features), Vec::new()),
            FieldKind::Matrix { .. } => {
                let mut dh = DMatrix::zeros(n, p);
                let mut d_omega = vec![0.0; p];
                let mut buf = vec![0.0; p];
                for i in 0..n {
                    let h: Vec<f64> = values.row(i).iter().copied().collect();
                    buf.iter_mut().for_each(|v| *v = 0.0);
                    sigma_backward(&h, &d_features[i * p * p..(i + 1) * p * p], &mut buf, &mut d_omega);
                    for c in 0..p {
                        dh[(i, c)] = buf[c];
                    }
                }
                (dh, d_omega)
            }
        }
    }

    /// Cholesky factor of the prior row covariance at the anchors.
    pub fn anchor_factor(&self) -> Result<CholeskyFactor> {
        prior_factor(&self.prior, &self.anchors)
    }

    /// Conditional expectation of the field at `x_star` (reduced path):
    /// `μ + K_*a K_a⁻¹ (V − μ)`.
    pub fn extrapolate(&self, x_star: &Points) -> Result<DMatrix<f64>> {
        let factor = self.anchor_factor()?;
        self.extrapolate_with(&factor, x_star)
    }

    pub(crate) fn extrapolate_with(&self, factor: &CholeskyFactor, x_star: &Points) -> Result<DMatrix<f64>> {
        let k_star = gram(&self.prior.kernel(), x_star, &self.anchors, None, None)?.values;
        let centred = self.values.add_scalar(-self.prior.mean);
        Ok(gaussian_cond_mean(&k_star, factor, &centred)?.add_scalar(self.prior.mean))
    }

    /// Same expectation through the dense Kronecker form
    /// `(Ψ ⊗ K_*a)(Ψ ⊗ K_a)⁻¹ vec(V − μ)`. Quadratic in `N·P`; used to cross-check.
    pub fn extrapolate_kronecker(&self, x_star: &Points) -> Result<DMatrix<f64>> {
        let kernel = self.prior.kernel();
        let mut k_aa = gram(&kernel, &self.anchors, &self.anchors, None, None)?.values;
        let jitter = self.anchor_factor()?.jitter_used();
        for i in 0..k_aa.nrows() {
            k_aa[(i, i)] += jitter;
        }
        let k_star = gram(&kernel, x_star, &self.anchors, None, None)?.values;
        let psi = &self.prior.column_covariance;
        let big = cholesky_psd(&kron(psi, &k_aa), LATENT_JITTER)?;
        let centred = vec_cols(&self.values.add_scalar(-self.prior.mean));
        let weights = big.solve_vec(&centred)?;
        let out = kron(psi, &k_star) * weights;
        Ok(unvec_cols(&out, x_star.len(), self.p())?.add_scalar(self.prior.mean))
    }

    /// Log prior density of the current values.
    pub fn log_prior(&self) -> Result<f64> {
        let fk = self.anchor_factor()?;
        let fp = cholesky_psd(&self.prior.column_covariance, LATENT_JITTER)?;
        Ok(matnorm_parts(&self.values.add_scalar(-self.prior.mean), &fk, &fp)?.value)
    }

    /// Moments of the conditional field at `x_star`: mean and row covariance
    /// `K_** − K_*a K_a⁻¹ K_a*` (the column covariance stays Ψ).
    pub fn conditional(&self, x_star: &Points) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let factor = self.anchor_factor()?;
        let kernel = self.prior.kernel();
        let k_star = gram(&kernel, x_star, &self.anchors, None, None)?.values;
        let k_ss = gram(&kernel, x_star, x_star, None, None)?.values;
        let v = factor.solve_lower(&k_star.transpose())?;
        let cov = k_ss - v.transpose() * v;
        let mean = self.extrapolate_with(&factor, x_star)?;
        Ok((mean, cov))
    }

    /// Values implied at `x_star`, clamped and exponentiated for lengthscale fields.
    pub fn lengthscales_at(&self, x_star: &Points) -> Result<DMatrix<f64>> {
        Ok(self.extrapolate(x_star)?.map(|v| clamp_log(v).exp()))
    }
}

/// Initial field for `kernel` at `anchors`, with the prior defaults taken
/// from `data`: log-lengthscales at the prior mean, or `H ~ N(0, 0.1²)` with
/// `Ω = 0.1`. `None` for stationary kernels.
pub fn default_field(kernel: &KernelSpec, data: &Points, anchors: Points, seed: u64) -> Result<Option<LatentField>> {
    let Some((kind, p)) = kernel.latent_requirement()? else {
        return Ok(None);
    };
    let dims = kernel.gibbs_dims().expect("Gibbs node").to_vec();
    let field = match kind {
        LatentKind::LogLengthscale => {
            let prior = FieldPrior::lengthscale_default(data, dims, p)?;
            LatentField::lengthscale_at_prior_mean(anchors, p, prior)?
        }
        LatentKind::Covariance => {
            let prior = FieldPrior::matrix_default(data, dims, p);
            LatentField::matrix_random_init(anchors, p, prior, 0.1, 0.1, seed)?
        }
    };
    Ok(Some(field))
}

pub(crate) fn prior_factor(prior: &FieldPrior, anchors: &Points) -> Result<CholeskyFactor> {
    let k = gram(&prior.kernel(), anchors, anchors, None, None)?.values;
    cholesky_psd(&k, GRAM_JITTER)
}

/// Positive lengthscales `exp(μ + K_*ℓ K_ℓ⁻¹(ℓ̂ − μ))` at `x_star`, one column per dimension.
pub fn extrapolate_lengthscale(field: &LatentField, x_star: &Points) -> Result<DMatrix<f64>> {
    if field.kind != FieldKind::Lengthscale {
        return Err(Error::InvalidConfig("extrapolate_lengthscale needs a lengthscale field".into()));
    }
    field.lengthscales_at(x_star)
}

/// Conditional expectation of `H` at `x_star`. Both the reduced and dense
/// Kronecker paths are evaluated; the reduced result is returned.
pub fn extrapolate_h(field: &LatentField, x_star: &Points) -> Result<DMatrix<f64>> {
    let reduced = field.extrapolate(x_star)?;
    if field.anchors.len() * field.p() <= 64 {
        let dense = field.extrapolate_kronecker(x_star)?;
        let scale = reduced.abs().max().max(1.0);
        debug_assert!((&dense - &reduced).abs().max() <= 1e-6 * scale);
    }
    Ok(reduced)
}

/// `count` draws of the field at `x_star` from its matrix-normal conditional.
pub fn sample_conditional_h(field: &LatentField, x_star: &Points, count: usize, seed: u64) -> Result<Vec<DMatrix<f64>>> {
    if count == 0 {
        return Err(Error::InvalidConfig("sample count must be at least 1".into()));
    }
    let (mean, cov) = field.conditional(x_star)?;
    let row_sqrt = psd_sqrt(&cov);
    let col_sqrt = psd_sqrt(&field.prior.column_covariance);
    let mut rng = substream(seed, "conditional-field");
    let (n, p) = mean.shape();
    Ok((0..count)
        .map(|_| {
            let e = DMatrix::from_fn(n, p, |_, _| rng.sample::<f64, _>(StandardNormal));
            &mean + &row_sqrt * e * col_sqrt.transpose()
        })
        .collect())
}

/// Which latent family, if any, a prior draw uses.
#[derive(Clone, Debug, PartialEq)]
pub enum PriorLatent {
    None,
    Lengthscale(FieldPrior),
    Matrix { prior: FieldPrior, omega: Vec<f64> },
}

/// One function drawn from the prior predictive.
#[derive(Clone, Debug)]
pub struct PriorDraw {
    pub f: DVector<f64>,
    /// Latent values at the grid (log-lengthscales or H rows).
    pub latent: Option<DMatrix<f64>>,
    /// Lengthscales (FGK) or diag Σ(x) (MGK) at the grid.
    pub summary: Option<DMatrix<f64>>,
}

/// Draws latent fields from their prior, then functions `f ~ N(0, K + jitter)`.
pub fn sample_prior_functions(
    spec: &KernelSpec,
    latent: &PriorLatent,
    x: &Points,
    count: usize,
    seed: u64,
) -> Result<Vec<PriorDraw>> {
    if x.len() > 2000 {
        return Err(Error::InvalidConfig(format!(
            "prior sampling grid limited to 2000 points, got {}",
            x.len()
        )));
    }
    spec.validate(x.dim())?;
    if count == 0 {
        return Ok(Vec::new());
    }
    let mut rng = substream(seed, "prior-draws");
    let n = x.len();
    let field_sqrt = |prior: &FieldPrior| -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let k = gram(&prior.kernel(), x, x, None, None)?.values;
        Ok((psd_sqrt(&k), psd_sqrt(&prior.column_covariance)))
    };
    let prepared = match latent {
        PriorLatent::None => None,
        PriorLatent::Lengthscale(prior) | PriorLatent::Matrix { prior, .. } => Some(field_sqrt(prior)?),
    };
    let mut draws = Vec::with_capacity(count);
    for _ in 0..count {
        let (field, summary) = match (latent, &prepared) {
            (PriorLatent::Lengthscale(prior), Some((rs, cs))) => {
                let p = prior.column_covariance.nrows();
                let e = DMatrix::from_fn(n, p, |_, _| rng.sample::<f64, _>(StandardNormal));
                let values = (rs * e * cs.transpose()).add_scalar(prior.mean);
                let f = LatentField::lengthscale(x.clone(), values, prior.clone())?;
                let summary = f.values.map(|v| clamp_log(v).exp());
                (Some(f), Some(summary))
            }
            (PriorLatent::Matrix { prior, omega }, Some((rs, cs))) => {
                let p = prior.column_covariance.nrows();
                let e = DMatrix::from_fn(n, p, |_, _| rng.sample::<f64, _>(StandardNormal));
                let values = rs * e * cs.transpose();
                let f = LatentField::matrix(x.clone(), values, omega.clone(), prior.clone())?;
                let summary = DMatrix::from_fn(n, p, |i, d| {
                    let h: Vec<f64> = f.values.row(i).iter().copied().collect();
                    sigma_from_h(&h, omega)[(d, d)]
                });
                (Some(f), Some(summary))
            }
            _ => (None, None),
        };
        let features = field.as_ref().map(|f| f.features(&f.values));
        let k = gram(spec, x, x, features.as_ref(), features.as_ref())?.values;
        let factor = cholesky_psd(&k, GRAM_JITTER)?;
        let z = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let f = factor.lower() * z;
        draws.push(PriorDraw {
            f,
            latent: field.map(|fl| fl.values),
            summary,
        });
    }
    Ok(draws)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::kron;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_points(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Points {
        Points::new(n, d, (0..n * d).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap()
    }

    fn dense_mvn_logpdf(x: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
        let n = x.len() as f64;
        let inv = cov.clone().try_inverse().unwrap();
        let det = cov.determinant();
        -0.5 * n * LN_2PI - 0.5 * det.ln() - 0.5 * (x.transpose() * inv * x)[(0, 0)]
    }

    #[test]
    fn sigma_examples() {
        let s = sigma_from_h(&[0.0, 0.0], &[1.0, 1.0]);
        let ln2 = 2f64.ln();
        assert_relative_eq!(s[(0, 0)], ln2 + 1.0, epsilon = 1e-15);
        assert_relative_eq!(s[(0, 1)], ln2, epsilon = 1e-15);
        let eig = s.symmetric_eigen().eigenvalues;
        assert!(eig.iter().all(|e| *e > 0.0));

        let s = sigma_from_h(&[1.0, 0.0], &[0.1, 0.1]);
        assert_relative_eq!(s[(0, 0)], 1.31326 + 0.1, epsilon = 1e-5);
        assert_relative_eq!(s[(0, 1)], 0.69315, epsilon = 1e-5);
        assert_relative_eq!(s[(1, 1)], 0.69315 + 0.1, epsilon = 1e-5);

        let s = sigma_from_h(&[0.3, -1.7, 2.2], &[0.2, 0.5, 0.1]);
        assert_eq!(s, s.transpose());
    }

    #[test]
    fn sigma_backward_matches_differences() {
        let h = [0.4, -0.9, 0.3];
        let omega = [0.2, 0.1, 0.3];
        let g: Vec<f64> = (0..9).map(|k| (k as f64 * 0.7).sin()).collect();
        let f = |h: &[f64], o: &[f64]| {
            let s = sigma_from_h(h, o);
            (0..9).map(|k| g[k] * s[(k / 3, k % 3)]).sum::<f64>()
        };
        let mut dh = [0.0; 3];
        let mut dom = [0.0; 3];
        sigma_backward(&h, &g, &mut dh, &mut dom);
        let eps = 1e-6;
        for c in 0..3 {
            let mut hp = h;
            let mut hm = h;
            hp[c] += eps;
            hm[c] -= eps;
            assert_relative_eq!(dh[c], (f(&hp, &omega) - f(&hm, &omega)) / (2.0 * eps), epsilon = 1e-8);
            let mut op = omega;
            let mut om = omega;
            op[c] += eps;
            om[c] -= eps;
            assert_relative_eq!(dom[c], (f(&h, &op) - f(&h, &om)) / (2.0 * eps), epsilon = 1e-8);
        }
    }

    #[test]
    fn matnorm_standard_normal() {
        let one = DMatrix::from_element(1, 1, 1.0);
        let v = matnorm_logpdf(&DMatrix::zeros(1, 1), &one, &one).unwrap();
        assert_relative_eq!(v, -0.5 * LN_2PI, epsilon = 1e-15);
        assert_relative_eq!(v, -0.91894, epsilon = 1e-5);
    }

    #[test]
    fn matnorm_matches_kronecker_and_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let g = DMatrix::from_fn(4, 4, |_, _| rng.gen_range(-1.0..1.0));
        let k = &g * g.transpose() + DMatrix::identity(4, 4) * 0.3;
        let gp = DMatrix::from_fn(2, 2, |_, _| rng.gen_range(-1.0..1.0));
        let psi = &gp * gp.transpose() + DMatrix::identity(2, 2) * 0.3;
        let h = DMatrix::from_fn(4, 2, |_, _| rng.gen_range(-1.0..1.0));
        let got = matnorm_logpdf(&h, &k, &psi).unwrap();
        let oracle = dense_mvn_logpdf(&vec_cols(&h), &kron(&psi, &k));
        assert_relative_eq!(got, oracle, epsilon = 1e-8);

        let psi_diag = DMatrix::from_diagonal(&DVector::from_vec(vec![0.7, 1.9]));
        let got = matnorm_logpdf(&h, &k, &psi_diag).unwrap();
        let oracle: f64 = (0..2)
            .map(|d| dense_mvn_logpdf(&h.column(d).into_owned(), &(&k * psi_diag[(d, d)])))
            .sum();
        assert_relative_eq!(got, oracle, epsilon = 1e-8);
    }

    fn line_field(values: &[f64], mean: f64) -> LatentField {
        let anchors = Points::from_1d(&[0.0, 1.0, 2.0]);
        let prior = FieldPrior {
            field_dims: vec![0],
            lengthscales: vec![1.0],
            variance: 1.0,
            mean,
            column_covariance: DMatrix::identity(1, 1),
        };
        LatentField::lengthscale(anchors, DMatrix::from_column_slice(3, 1, values), prior).unwrap()
    }

    #[test]
    fn lengthscale_extrapolation_examples() {
        let field = line_field(&[-0.3, 0.2, 0.5], 0.1);
        let at_anchors = extrapolate_lengthscale(&field, &field.anchors).unwrap();
        for i in 0..3 {
            assert_relative_eq!(at_anchors[(i, 0)], field.values[(i, 0)].exp(), epsilon = 1e-6);
        }

        let flat = line_field(&[0.8, 0.8, 0.8], -0.4);
        let far = extrapolate_lengthscale(&flat, &Points::from_1d(&[100.0])).unwrap();
        assert_relative_eq!(far[(0, 0)], (-0.4f64).exp(), epsilon = 1e-12);

        let mid = extrapolate_lengthscale(&field, &Points::from_1d(&[0.5])).unwrap();
        let se = |a: f64, b: f64| (-0.5 * (a - b) * (a - b)).exp();
        let xs = [0.0, 1.0, 2.0];
        let k = DMatrix::from_fn(3, 3, |i, j| se(xs[i], xs[j]));
        let ks = DMatrix::from_fn(1, 3, |_, j| se(0.5, xs[j]));
        let r = DVector::from_vec(vec![-0.4, 0.1, 0.4]);
        let oracle = 0.1 + (ks * k.try_inverse().unwrap() * r)[(0, 0)];
        assert_relative_eq!(mid[(0, 0)], oracle.exp(), epsilon = 1e-10);
    }

    fn random_matrix_field(rng: &mut ChaCha8Rng, n: usize, d: usize) -> LatentField {
        let anchors = random_points(rng, n, d);
        let gp = DMatrix::from_fn(d, d, |_, _| rng.gen_range(-1.0..1.0));
        let psi = &gp * gp.transpose() + DMatrix::identity(d, d) * 0.2;
        let prior = FieldPrior {
            field_dims: (0..d).collect(),
            lengthscales: vec![1.3; d],
            variance: 1.0,
            mean: 0.0,
            column_covariance: psi,
        };
        let h = DMatrix::from_fn(n, d, |_, _| rng.gen_range(-1.0..1.0));
        LatentField::matrix(anchors, h, vec![0.1; d], prior).unwrap()
    }

    #[test]
    fn h_extrapolation_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let field = random_matrix_field(&mut rng, 4, 2);
        let at = extrapolate_h(&field, &field.anchors).unwrap();
        assert!((at - &field.values).abs().max() < 1e-8);

        let stars = random_points(&mut rng, 3, 2);
        let a = field.extrapolate(&stars).unwrap();
        let b = field.extrapolate_kronecker(&stars).unwrap();
        assert!((a - b).abs().max() < 1e-8);

        let one = field.anchors.select(&[2]);
        let row = extrapolate_h(&field, &one).unwrap();
        for c in 0..2 {
            assert_relative_eq!(row[(0, c)], field.values[(2, c)], epsilon = 1e-8);
        }
    }

    #[test]
    fn conditional_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let field = random_matrix_field(&mut rng, 4, 2);
        let at_anchors = sample_conditional_h(&field, &field.anchors, 5, 3).unwrap();
        for s in &at_anchors {
            assert!((s - &field.values).abs().max() < 1e-6);
        }

        let stars = random_points(&mut rng, 2, 2);
        let a = sample_conditional_h(&field, &stars, 4, 99).unwrap();
        let b = sample_conditional_h(&field, &stars, 4, 99).unwrap();
        assert_eq!(a, b);

        let j = 10_000;
        let draws = sample_conditional_h(&field, &stars, j, 5).unwrap();
        let (mean, cov) = field.conditional(&stars).unwrap();
        let psi = &field.prior.column_covariance;
        for r in 0..2 {
            for c in 0..2 {
                let avg = draws.iter().map(|d| d[(r, c)]).sum::<f64>() / j as f64;
                let sd = (cov[(r, r)] * psi[(c, c)]).sqrt();
                assert!((avg - mean[(r, c)]).abs() <= 3.0 * sd / (j as f64).sqrt() + 1e-12);
            }
        }
        assert!(sample_conditional_h(&field, &stars, 0, 1).is_err());
    }

    #[test]
    fn prior_sampling() {
        let x = Points::from_1d(&(0..30).map(|i| i as f64 * 0.2).collect::<Vec<_>>());
        let spec = KernelSpec::se_ard(1.7, vec![0.5], vec![0]);
        assert!(sample_prior_functions(&spec, &PriorLatent::None, &x, 0, 1).unwrap().is_empty());

        let draws = sample_prior_functions(&spec, &PriorLatent::None, &x, 1000, 21).unwrap();
        let var = draws.iter().map(|d| d.f[7] * d.f[7]).sum::<f64>() / 1000.0;
        assert!((var - 1.7).abs() < 0.17, "variance {var}");

        let prior = FieldPrior {
            field_dims: vec![0],
            lengthscales: vec![1.0],
            variance: 1.0,
            mean: -1.0,
            column_covariance: DMatrix::identity(1, 1),
        };
        let fgk = sample_prior_functions(&KernelSpec::fgk(vec![0]), &PriorLatent::Lengthscale(prior), &x, 3, 4).unwrap();
        assert_eq!(fgk.len(), 3);
        assert!(fgk[0].summary.as_ref().unwrap().iter().all(|l| *l > 0.0));
    }

    #[test]
    fn sigma_can_be_indefinite_in_three_dims() {
        let h = [0.0, -3.1754452297708142, -9.40999628930199];
        let s = sigma_from_h(&h, &[0.01; 3]);
        // w = (a₁ − a₂, a₂, −a₁) with a = h∘h cancels the near rank-one block
        let a: Vec<f64> = h.iter().map(|v| v * v).collect();
        let w = nalgebra::DVector::from_vec(vec![a[1] - a[2], a[2], -a[1]]);
        assert!((w.transpose() * &s * &w)[(0, 0)] < 0.0);
        assert!(s.symmetric_eigenvalues().min() < -0.1);
        let err = crate::kernels::k_mgk(&[0.0; 3], &[0.1; 3], &s, &s).unwrap_err();
        assert!(err.is_numerical());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        // Holds for D ≤ 2 only; see `sigma_can_be_indefinite_in_three_dims`.
        #[test]
        fn sigma_is_positive_definite(h in proptest::collection::vec(-10.0f64..10.0, 1..=2),
                                      om in proptest::collection::vec(0.01f64..2.0, 3)) {
            let norm = h.iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assume!(norm <= 10.0);
            let s = sigma_from_h(&h, &om[..h.len()]);
            let f = cholesky_psd(&s, LATENT_JITTER).unwrap();
            prop_assert_eq!(f.jitter_used(), 0.0);
        }

        #[test]
        fn lengthscales_always_positive(vals in proptest::collection::vec(-50.0f64..50.0, 3), x in -100.0f64..100.0) {
            let field = line_field(&vals, 0.0);
            let l = extrapolate_lengthscale(&field, &Points::from_1d(&[x])).unwrap();
            prop_assert!(l[(0, 0)] > 0.0 && l[(0, 0)].is_finite());
        }
    }
}
