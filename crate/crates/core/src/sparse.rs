//! Inducing-point GP training with the collapsed bound.
//!
//! Every evaluation runs the dynamic forward pass: the latent field is
//! stored at the inducing inputs `Z`, extrapolated to the training inputs
//! through its conditional mean, and only then are the Gibbs Gram blocks
//! built. Moving `Z` therefore moves both the inducing variables and the
//! field they anchor.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::cluster::kmeans;
use crate::error::{mismatch, Error, Result};
use crate::exact::{check_field, PredictiveDistribution, TargetScaling, LN_2PI};
use crate::kernels::{diag_backward, gram, gram_backward, gram_diag, KernelSpec, LatentRows};
use crate::latent::{default_field, matnorm_parts, prior_factor, sigmoid, softplus, softplus_inv, FieldKind, LatentField};
use crate::linalg::{cholesky_psd, CholeskyFactor, GRAM_JITTER, LATENT_JITTER};
use crate::optim::{minimize, Objective, OptimConfig, TrainTrace};
use crate::points::Points;

/// Fraction of the data range by which inducing inputs may leave the data box.
pub const INDUCING_BOX_MARGIN: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparseModel {
    pub kernel: KernelSpec,
    pub noise_variance: f64,
    pub train_inputs: Points,
    pub train_targets: Vec<f64>,
    pub scaling: TargetScaling,
    pub inducing: Points,
    /// Latent field anchored at `inducing`.
    pub latent: Option<LatentField>,
}

impl SparseModel {
    pub fn new(
        kernel: KernelSpec,
        noise_variance: f64,
        train_inputs: Points,
        train_targets: Vec<f64>,
        inducing: Points,
        latent: Option<LatentField>,
    ) -> Result<Self> {
        let model = Self {
            kernel,
            noise_variance,
            train_inputs,
            train_targets,
            scaling: TargetScaling::default(),
            inducing,
            latent,
        };
        model.validate()?;
        Ok(model)
    }

    /// Inducing inputs at k-means centroids of the training inputs and a
    /// default latent field at those centroids.
    pub fn initialise(
        kernel: KernelSpec,
        noise_variance: f64,
        train_inputs: Points,
        train_targets: Vec<f64>,
        m: usize,
        seed: u64,
    ) -> Result<Self> {
        if m == 0 || m > train_inputs.len() {
            return Err(Error::InvalidConfig(format!(
                "inducing count must be in 1..={}, got {m}",
                train_inputs.len()
            )));
        }
        let z = kmeans(&train_inputs, m, seed)?.centroids;
        let latent = default_field(&kernel, &train_inputs, z.clone(), seed)?;
        Self::new(kernel, noise_variance, train_inputs, train_targets, z, latent)
    }

    pub fn with_scaling(mut self, scaling: TargetScaling) -> Self {
        self.scaling = scaling;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.noise_variance > 0.0 && self.noise_variance.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "noise variance must be positive, got {}",
                self.noise_variance
            )));
        }
        let n = self.train_inputs.len();
        if n != self.train_targets.len() {
            return Err(mismatch(format!("{n} training inputs but {} targets", self.train_targets.len())));
        }
        if n == 0 {
            return Err(Error::EmptyDataset);
        }
        let m = self.inducing.len();
        if m == 0 || m > n {
            return Err(Error::InvalidConfig(format!("inducing count must be in 1..={n}, got {m}")));
        }
        if self.inducing.dim() != self.train_inputs.dim() {
            return Err(mismatch("inducing inputs differ in dimension from training inputs"));
        }
        self.kernel.validate(self.train_inputs.dim())?;
        check_field(&self.kernel, self.latent.as_ref(), m)
    }

    /// Box the inducing inputs are clamped to.
    pub fn inducing_box(&self) -> Vec<(f64, f64)> {
        self.train_inputs
            .bounds()
            .into_iter()
            .map(|(lo, hi)| {
                let pad = INDUCING_BOX_MARGIN * (hi - lo);
                (lo - pad, hi + pad)
            })
            .collect()
    }
}

struct FieldPass {
    factor: CholeskyFactor,
    /// `K_xz K_zz⁻¹` for the field prior kernel.
    weights: DMatrix<f64>,
}

/// Gram blocks produced by one forward pass.
pub struct ForwardPass {
    /// Field values extrapolated to the training inputs.
    pub values_x: Option<DMatrix<f64>>,
    pub features_x: Option<LatentRows>,
    pub features_z: Option<LatentRows>,
    pub k_nm: DMatrix<f64>,
    pub k_mm: DMatrix<f64>,
    pub k_nn_diag: Vec<f64>,
    /// Full `K_nn`, only when requested.
    pub k_nn: Option<DMatrix<f64>>,
    field: Option<FieldPass>,
}

/// Runs `Z → H_z → E[H | H_z] → Σ (or ℓ) → K` for the current model state.
pub fn dynamic_forward_pass(model: &SparseModel, full_knn: bool) -> Result<ForwardPass> {
    let x = &model.train_inputs;
    let z = &model.inducing;
    let (values_x, features_x, features_z, field) = match &model.latent {
        None => (None, None, None, None),
        Some(f) => {
            if f.anchors != *z {
                return Err(Error::InvalidConfig("latent field must be anchored at the inducing inputs".into()));
            }
            let factor = prior_factor(&f.prior, z)?;
            let k_xz = gram(&f.prior.kernel(), x, z, None, None)?.values;
            let weights = factor.solve(&k_xz.transpose())?.transpose();
            let values_x = (&weights * f.values.add_scalar(-f.prior.mean)).add_scalar(f.prior.mean);
            let fx = f.features(&values_x);
            let fz = f.features(&f.values);
            (Some(values_x), Some(fx), Some(fz), Some(FieldPass { factor, weights }))
        }
    };
    let k_nm = gram(&model.kernel, x, z, features_x.as_ref(), features_z.as_ref())?.values;
    let k_mm = gram(&model.kernel, z, z, features_z.as_ref(), features_z.as_ref())?.values;
    let k_nn_diag = gram_diag(&model.kernel, x, features_x.as_ref())?;
    let k_nn = if full_knn {
        Some(gram(&model.kernel, x, x, features_x.as_ref(), features_x.as_ref())?.values)
    } else {
        None
    };
    Ok(ForwardPass {
        values_x,
        features_x,
        features_z,
        k_nm,
        k_mm,
        k_nn_diag,
        k_nn,
        field,
    })
}

/// Terms of the collapsed objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ElboParts {
    /// Collapsed bound including the trace penalty.
    pub bound: f64,
    /// `tr(K_nn − Q_nn)`.
    pub trace_term: f64,
    /// Latent-field log prior at the inducing anchors (0 without a field).
    pub hyperprior: f64,
    pub total: f64,
}

struct Collapsed {
    parts: ElboParts,
    l: CholeskyFactor,
    /// `L⁻¹ K_mn / √s`.
    a: DMatrix<f64>,
    lb: CholeskyFactor,
    /// `L_B⁻¹ A y / √s`.
    c: DVector<f64>,
}

fn collapse(noise: f64, y: &DVector<f64>, pass: &ForwardPass) -> Result<Collapsed> {
    let n = y.len();
    let m = pass.k_mm.nrows();
    let s = noise;
    let l = cholesky_psd(&pass.k_mm, GRAM_JITTER)?;
    let a = l.solve_lower(&pass.k_nm.transpose())? / s.sqrt();
    let mut b = &a * a.transpose();
    let tr_aat = b.trace();
    for i in 0..m {
        b[(i, i)] += 1.0;
    }
    let lb = cholesky_psd(&b, GRAM_JITTER)?;
    let ay = &a * y;
    let c = lb.solve_lower(&DMatrix::from_column_slice(m, 1, ay.as_slice()))?.column(0) / s.sqrt();
    let tr_knn: f64 = pass.k_nn_diag.iter().sum();
    let trace_term = tr_knn - s * tr_aat;
    let nf = n as f64;
    let bound = -0.5 * nf * LN_2PI - 0.5 * lb.log_det() - 0.5 * nf * s.ln() - 0.5 * y.dot(y) / s
        + 0.5 * c.dot(&c)
        - 0.5 * trace_term / s;
    Ok(Collapsed {
        parts: ElboParts {
            bound,
            trace_term,
            hyperprior: 0.0,
            total: bound,
        },
        l,
        a,
        lb,
        c: c.into_owned(),
    })
}

fn hyperprior(field: &LatentField, fp: &FieldPass) -> Result<(f64, DMatrix<f64>)> {
    let psi = cholesky_psd(&field.prior.column_covariance, LATENT_JITTER)?;
    let parts = matnorm_parts(&field.values.add_scalar(-field.prior.mean), &fp.factor, &psi)?;
    Ok((parts.value, parts.kinv_h_psiinv))
}

/// Collapsed bound plus the latent-field hyperprior at the inducing anchors.
pub fn collapsed_elbo(model: &SparseModel) -> Result<ElboParts> {
    model.validate()?;
    let pass = dynamic_forward_pass(model, false)?;
    let y = DVector::from_column_slice(&model.train_targets);
    let mut parts = collapse(model.noise_variance, &y, &pass)?.parts;
    if let (Some(field), Some(fp)) = (&model.latent, &pass.field) {
        parts.hyperprior = hyperprior(field, fp)?.0;
        parts.total = parts.bound + parts.hyperprior;
    }
    Ok(parts)
}

/// Predictive under the optimal collapsed `q(u)`, recomputed from the
/// current hyperparameters. The field is extrapolated from `Z` to `x_star`.
pub fn sparse_predictive(model: &SparseModel, x_star: &Points) -> Result<PredictiveDistribution> {
    model.validate()?;
    if x_star.dim() != model.train_inputs.dim() {
        return Err(mismatch("test inputs differ in dimension from training inputs"));
    }
    let pass = dynamic_forward_pass(model, false)?;
    let y = DVector::from_column_slice(&model.train_targets);
    let col = collapse(model.noise_variance, &y, &pass)?;
    let lat_star = match &model.latent {
        Some(f) => Some(f.features(&f.extrapolate(x_star)?)),
        None => None,
    };
    let (mean, variance) = if x_star.is_empty() {
        (Vec::new(), Vec::new())
    } else {
        let k_sm = gram(&model.kernel, x_star, &model.inducing, lat_star.as_ref(), pass.features_z.as_ref())?.values;
        let t1 = col.l.solve_lower(&k_sm.transpose())?;
        let t2 = col.lb.solve_lower(&t1)?;
        let mean: Vec<f64> = (t2.transpose() * &col.c).iter().copied().collect();
        let prior = gram_diag(&model.kernel, x_star, lat_star.as_ref())?;
        let variance = (0..x_star.len())
            .map(|i| (prior[i] + t2.column(i).norm_squared() - t1.column(i).norm_squared()).max(0.0))
            .collect();
        (mean, variance)
    };
    let s = &model.scaling;
    let s2 = s.scale * s.scale;
    Ok(PredictiveDistribution {
        mean: mean.into_iter().map(|m| s.to_gaussian(m)).collect(),
        variance: variance.into_iter().map(|v| v * s2).collect(),
        covariance: None,
        noise_variance: model.noise_variance * s2,
        transform: s.transform,
        mixture: None,
    })
}

/// Which parts of a sparse model are optimised.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SparseTrainable {
    pub kernel: bool,
    pub noise: bool,
    pub inducing: bool,
    pub latent: bool,
}

impl Default for SparseTrainable {
    fn default() -> Self {
        Self {
            kernel: true,
            noise: true,
            inducing: true,
            latent: true,
        }
    }
}

/// Negative collapsed objective over
/// `[log kernel hypers | log σ_n² | Z (row-major) | field values at Z | softplus⁻¹ Ω]`.
pub struct SparseObjective {
    template: SparseModel,
    trainable: SparseTrainable,
    bounds: Vec<(f64, f64)>,
}

impl SparseObjective {
    pub fn new(model: &SparseModel, trainable: SparseTrainable) -> Result<Self> {
        model.validate()?;
        Ok(Self {
            bounds: model.inducing_box(),
            template: model.clone(),
            trainable,
        })
    }

    fn n_hyper(&self) -> usize {
        if self.trainable.kernel {
            self.template.kernel.n_hyperparameters()
        } else {
            0
        }
    }

    fn n_inducing(&self) -> usize {
        if self.trainable.inducing {
            self.template.inducing.as_slice().len()
        } else {
            0
        }
    }

    fn n_latent(&self) -> usize {
        match (&self.template.latent, self.trainable.latent) {
            (Some(f), true) => f.values.len() + f.omega().map_or(0, <[f64]>::len),
            _ => 0,
        }
    }

    pub fn pack(&self, model: &SparseModel) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.dim());
        if self.trainable.kernel {
            out.extend(model.kernel.hyperparameters());
        }
        if self.trainable.noise {
            out.push(model.noise_variance.ln());
        }
        if self.trainable.inducing {
            out.extend_from_slice(model.inducing.as_slice());
        }
        if let (Some(f), true) = (&model.latent, self.trainable.latent) {
            for i in 0..f.values.nrows() {
                out.extend(f.values.row(i).iter());
            }
            if let Some(omega) = f.omega() {
                out.extend(omega.iter().map(|o| softplus_inv(*o)));
            }
        }
        out
    }

    pub fn unpack(&self, params: &[f64]) -> Result<SparseModel> {
        if params.len() != self.dim() {
            return Err(mismatch(format!("expected {} parameters, got {}", self.dim(), params.len())));
        }
        let mut model = self.template.clone();
        let mut at = 0;
        if self.trainable.kernel {
            let nh = self.n_hyper();
            model.kernel = model.kernel.with_hyperparameters(&params[..nh])?;
            at = nh;
        }
        if self.trainable.noise {
            model.noise_variance = params[at].exp();
            at += 1;
        }
        if self.trainable.inducing {
            let k = self.n_inducing();
            model.inducing.as_mut_slice().copy_from_slice(&params[at..at + k]);
            at += k;
            if let Some(f) = model.latent.as_mut() {
                f.anchors = model.inducing.clone();
            }
        }
        if let (Some(f), true) = (model.latent.as_mut(), self.trainable.latent) {
            let (m, p) = f.values.shape();
            f.values = DMatrix::from_row_slice(m, p, &params[at..at + m * p]);
            at += m * p;
            if let FieldKind::Matrix { omega } = &mut f.kind {
                for (o, raw) in omega.iter_mut().zip(&params[at..at + p]) {
                    *o = softplus(*raw);
                }
            }
        }
        Ok(model)
    }

    /// Maximised objective and its gradient in packed coordinates.
    pub fn elbo_grad(&self, params: &[f64]) -> Result<(ElboParts, Vec<f64>)> {
        let model = self.unpack(params)?;
        let pass = dynamic_forward_pass(&model, false)?;
        let y = DVector::from_column_slice(&model.train_targets);
        let col = collapse(model.noise_variance, &y, &pass)?;
        let mut parts = col.parts;
        let s = model.noise_variance;
        let n = y.len();
        let m = pass.k_mm.nrows();

        // adjoints of the bound with respect to K_nm, K_mm, diag K_nn and s
        let b_inv = col.lb.inverse();
        let ay = &col.a * &y;
        let beta = (&y - col.a.transpose() * (&b_inv * &ay)) / s;
        let p_mat = col.l.solve(&pass.k_nm.transpose())?.transpose();
        let ap = &col.a * &p_mat;
        let u = p_mat.transpose() * &beta;
        let b_inv_ap = &b_inv * &ap;
        let d_knm = &beta * u.transpose() + col.a.transpose() * &b_inv_ap / s;
        let mut d_kmm = -(&u * u.transpose()) * 0.5 - ap.transpose() * &b_inv_ap / (2.0 * s);
        let tr_sigma_inv = (n as f64 - m as f64 + b_inv.trace()) / s;
        let d_s = 0.5 * (beta.dot(&beta) - tr_sigma_inv) + 0.5 * parts.trace_term / (s * s);
        let d_diag = vec![-0.5 / s; n];
        d_kmm = crate::linalg::symmetrize(&d_kmm);

        let x = &model.train_inputs;
        let z = &model.inducing;
        let fx = pass.features_x.as_ref();
        let fz = pass.features_z.as_ref();
        let g_nm = gram_backward(&model.kernel, x, z, fx, fz, &d_knm)?;
        let g_mm = gram_backward(&model.kernel, z, z, fz, fz, &d_kmm)?;
        let g_nn = diag_backward(&model.kernel, x, fx, &d_diag)?;

        let dim = z.dim();
        let mut d_z = vec![0.0; m * dim];
        for k in 0..m * dim {
            d_z[k] = g_nm.cols_x[k] + g_mm.rows_x[k] + g_mm.cols_x[k];
        }
        let mut d_hz = None;
        let mut d_omega = Vec::new();
        if let (Some(field), Some(fp)) = (&model.latent, &pass.field) {
            let values_x = pass.values_x.as_ref().expect("extrapolated field");
            let d_feat_x: Vec<f64> = g_nm.rows_latent.iter().zip(&g_nn.rows_latent).map(|(a, b)| a + b).collect();
            let d_feat_z: Vec<f64> = g_nm
                .cols_latent
                .iter()
                .zip(&g_mm.rows_latent)
                .zip(&g_mm.cols_latent)
                .map(|((a, b), c)| a + b + c)
                .collect();
            let (d_vx, d_om_x) = field.features_backward(values_x, &d_feat_x);
            let (mut dh, d_om_z) = field.features_backward(&field.values, &d_feat_z);
            d_omega = d_om_x.iter().zip(&d_om_z).map(|(a, b)| a + b).collect();

            // through the conditional-mean extrapolation
            let centred = field.values.add_scalar(-field.prior.mean);
            dh += fp.weights.transpose() * &d_vx;
            let g_a = &d_vx * centred.transpose();
            let d_kxz = fp.factor.solve(&g_a.transpose())?.transpose();
            let mut d_kzz = -(fp.weights.transpose() * &d_kxz);

            // hyperprior at the inducing anchors
            let (hp, kinv_r_psiinv) = hyperprior(field, fp)?;
            parts.hyperprior = hp;
            parts.total = parts.bound + hp;
            dh -= &kinv_r_psiinv;
            let kinv_r = fp.factor.solve(&centred)?;
            let p = field.p() as f64;
            d_kzz += (&kinv_r_psiinv * kinv_r.transpose() - fp.factor.inverse() * p) * 0.5;

            let prior_kernel = field.prior.kernel();
            let g_xz = gram_backward(&prior_kernel, x, z, None, None, &d_kxz)?;
            let g_zz = gram_backward(&prior_kernel, z, z, None, None, &d_kzz)?;
            for k in 0..m * dim {
                d_z[k] += g_xz.cols_x[k] + g_zz.rows_x[k] + g_zz.cols_x[k];
            }
            d_hz = Some(dh);
        }

        let mut grad = Vec::with_capacity(self.dim());
        if self.trainable.kernel {
            grad.extend(g_nm.hyper.iter().zip(&g_mm.hyper).zip(&g_nn.hyper).map(|((a, b), c)| a + b + c));
        }
        if self.trainable.noise {
            grad.push(d_s * s);
        }
        if self.trainable.inducing {
            grad.extend(d_z);
        }
        if let (Some(field), true) = (&model.latent, self.trainable.latent) {
            let dh = d_hz.expect("field gradient");
            for i in 0..dh.nrows() {
                grad.extend(dh.row(i).iter());
            }
            if let Some(omega) = field.omega() {
                for (c, o) in omega.iter().enumerate() {
                    grad.push(d_omega[c] * sigmoid(softplus_inv(*o)));
                }
            }
        }
        Ok((parts, grad))
    }

    pub fn template(&self) -> &SparseModel {
        &self.template
    }
}

impl Objective for SparseObjective {
    fn dim(&self) -> usize {
        self.n_hyper() + usize::from(self.trainable.noise) + self.n_inducing() + self.n_latent()
    }

    fn value_grad(&self, params: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (parts, g) = self.elbo_grad(params)?;
        Ok((-parts.total, g.into_iter().map(|e| -e).collect()))
    }

    fn project(&self, params: &mut [f64]) {
        if !self.trainable.inducing {
            return;
        }
        let start = self.n_hyper() + usize::from(self.trainable.noise);
        let dim = self.bounds.len();
        for (k, v) in params[start..start + self.n_inducing()].iter_mut().enumerate() {
            let (lo, hi) = self.bounds[k % dim];
            *v = v.clamp(lo, hi);
        }
    }
}

/// Jointly ascends the collapsed objective. The trace records the maximised objective.
pub fn sparse_fit(model: &SparseModel, trainable: SparseTrainable, config: &OptimConfig) -> Result<(SparseModel, TrainTrace)> {
    let objective = SparseObjective::new(model, trainable)?;
    let start = objective.pack(model);
    let (best, trace) = minimize(&objective, &start, config)?;
    Ok((objective.unpack(&best)?, trace.negated()))
}
