//! Exact Gaussian-process regression: marginal likelihood, MAP objectives
//! for latent-field kernels, and closed-form / Monte-Carlo predictives.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{mismatch, Error, Result};
use crate::kernels::{gram, gram_backward, gram_diag, KernelSpec, LatentKind, LatentRows};
use crate::latent::{matnorm_parts, sample_conditional_h, sigmoid, softplus, softplus_inv, FieldKind, LatentField};
use crate::linalg::{cholesky_psd, CholeskyFactor, GRAM_JITTER, LATENT_JITTER};
use crate::optim::{minimize, Objective, OptimConfig, TrainTrace};
use crate::points::Points;

pub(crate) const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetTransform {
    #[default]
    None,
    Log,
}

/// Maps observed targets `y` to model space `t = (g(y) − shift) / scale`,
/// with `g = log` under the log transform.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetScaling {
    pub transform: TargetTransform,
    pub shift: f64,
    pub scale: f64,
}

impl Default for TargetScaling {
    fn default() -> Self {
        Self::identity(TargetTransform::None)
    }
}

impl TargetScaling {
    pub fn identity(transform: TargetTransform) -> Self {
        Self {
            transform,
            shift: 0.0,
            scale: 1.0,
        }
    }

    /// `g(y)`, rejecting non-positive targets under the log transform.
    pub fn gaussian_space(transform: TargetTransform, y: &[f64]) -> Result<Vec<f64>> {
        match transform {
            TargetTransform::None => Ok(y.to_vec()),
            TargetTransform::Log => y
                .iter()
                .enumerate()
                .map(|(row, &value)| {
                    if value > 0.0 {
                        Ok(value.ln())
                    } else {
                        Err(Error::NonPositiveTarget { row, value })
                    }
                })
                .collect(),
        }
    }

    /// Standardising scaling estimated from training targets.
    pub fn fit(transform: TargetTransform, y: &[f64]) -> Result<Self> {
        let g = Self::gaussian_space(transform, y)?;
        if g.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let n = g.len() as f64;
        let mean = g.iter().sum::<f64>() / n;
        let var = g.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let scale = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
        Ok(Self {
            transform,
            shift: mean,
            scale,
        })
    }

    pub fn forward(&self, y: &[f64]) -> Result<Vec<f64>> {
        Ok(Self::gaussian_space(self.transform, y)?
            .into_iter()
            .map(|g| (g - self.shift) / self.scale)
            .collect())
    }

    /// Model-space values back to the Gaussian (pre-exponential) space.
    pub fn to_gaussian(&self, t: f64) -> f64 {
        t * self.scale + self.shift
    }
}

/// Per-component moments of a Gaussian mixture predictive (Gaussian space,
/// latent variances without noise).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureComponents {
    pub means: Vec<Vec<f64>>,
    pub variances: Vec<Vec<f64>>,
}

/// Predictive distribution over latent function values, expressed in the
/// Gaussian space of the targets (log space under the log transform).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictiveDistribution {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none", with = "opt_matrix")]
    pub covariance: Option<DMatrix<f64>>,
    /// Observation noise in the same space; add it to score noisy targets.
    pub noise_variance: f64,
    pub transform: TargetTransform,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mixture: Option<MixtureComponents>,
}

mod opt_matrix {
    use nalgebra::DMatrix;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &Option<DMatrix<f64>>, s: S) -> Result<S::Ok, S::Error> {
        m.as_ref()
            .map(|m| (0..m.nrows()).map(|i| m.row(i).iter().copied().collect::<Vec<_>>()).collect::<Vec<_>>())
            .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<DMatrix<f64>>, D::Error> {
        let rows: Option<Vec<Vec<f64>>> = Option::deserialize(d)?;
        Ok(rows.map(|rows| {
            let nc = rows.first().map_or(0, Vec::len);
            DMatrix::from_row_iterator(rows.len(), nc, rows.into_iter().flatten())
        }))
    }
}

impl PredictiveDistribution {
    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    /// Variance of a new noisy observation at each point.
    pub fn noisy_variance(&self) -> Vec<f64> {
        self.variance.iter().map(|v| v + self.noise_variance).collect()
    }

    /// Point forecast in the original target space: the mean, or the
    /// log-normal median `exp(μ)` under the log transform.
    pub fn point_forecast(&self) -> Vec<f64> {
        match self.transform {
            TargetTransform::None => self.mean.clone(),
            TargetTransform::Log => self.mean.iter().map(|m| m.exp()).collect(),
        }
    }

    /// Quantile `q` of the noisy observation predictive in the original space.
    pub fn quantile(&self, q: f64) -> Result<Vec<f64>> {
        if !(q > 0.0 && q < 1.0) {
            return Err(Error::InvalidConfig(format!("quantile must lie in (0, 1), got {q}")));
        }
        let z = standard_normal_quantile(q);
        Ok(self
            .mean
            .iter()
            .zip(self.noisy_variance())
            .map(|(m, v)| {
                let g = m + v.max(0.0).sqrt() * z;
                match self.transform {
                    TargetTransform::None => g,
                    TargetTransform::Log => g.exp(),
                }
            })
            .collect())
    }
}

pub fn standard_normal_quantile(q: f64) -> f64 {
    Normal::new(0.0, 1.0).expect("unit normal").inverse_cdf(q)
}

/// An exact GP regression model. Targets live in model space (see
/// [`TargetScaling`]); a latent field, when present, is anchored at the
/// training inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GpModel {
    pub kernel: KernelSpec,
    pub noise_variance: f64,
    pub train_inputs: Points,
    pub train_targets: Vec<f64>,
    pub latent: Option<LatentField>,
    pub scaling: TargetScaling,
}

impl GpModel {
    pub fn new(
        kernel: KernelSpec,
        noise_variance: f64,
        train_inputs: Points,
        train_targets: Vec<f64>,
        latent: Option<LatentField>,
    ) -> Result<Self> {
        let model = Self {
            kernel,
            noise_variance,
            train_inputs,
            train_targets,
            latent,
            scaling: TargetScaling::default(),
        };
        model.validate()?;
        Ok(model)
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
        if self.train_inputs.len() != self.train_targets.len() {
            return Err(mismatch(format!(
                "{} training inputs but {} targets",
                self.train_inputs.len(),
                self.train_targets.len()
            )));
        }
        if self.train_inputs.is_empty() {
            return Err(Error::EmptyDataset);
        }
        self.kernel.validate(self.train_inputs.dim())?;
        check_field(&self.kernel, self.latent.as_ref(), self.train_inputs.len())
    }

    pub fn n(&self) -> usize {
        self.train_targets.len()
    }

    pub(crate) fn train_features(&self) -> Option<LatentRows> {
        self.latent.as_ref().map(|f| f.features(&f.values))
    }

    /// Factorises `K + σ_n² I` and solves for the weight vector.
    fn condition(&self) -> Result<Conditioned> {
        let features = self.train_features();
        let x = &self.train_inputs;
        let mut k = gram(&self.kernel, x, x, features.as_ref(), features.as_ref())?.values;
        for i in 0..k.nrows() {
            k[(i, i)] += self.noise_variance;
        }
        let factor = cholesky_psd(&k, GRAM_JITTER)?;
        let y = DVector::from_column_slice(&self.train_targets);
        let alpha = factor.solve_vec(&y)?;
        Ok(Conditioned {
            factor,
            alpha,
            y,
            features,
        })
    }
}

/// Checks that a field matches the kernel's latent requirement and has one
/// row per expected anchor.
pub(crate) fn check_field(kernel: &KernelSpec, field: Option<&LatentField>, rows: usize) -> Result<()> {
    match (kernel.latent_requirement()?, field) {
        (None, None) => Ok(()),
        (None, Some(_)) => Err(Error::InvalidConfig("stationary kernel given a latent field".into())),
        (Some(_), None) => Err(Error::MissingLatentContext),
        (Some((kind, p)), Some(f)) => {
            if f.latent_kind() != kind || f.p() != p {
                return Err(mismatch(format!(
                    "kernel needs a {kind:?} field of width {p}, got {:?} of width {}",
                    f.latent_kind(),
                    f.p()
                )));
            }
            if f.values.nrows() != rows {
                return Err(mismatch(format!("field has {} rows, expected {rows}", f.values.nrows())));
            }
            Ok(())
        }
    }
}

struct Conditioned {
    factor: CholeskyFactor,
    alpha: DVector<f64>,
    y: DVector<f64>,
    features: Option<LatentRows>,
}

impl Conditioned {
    fn lml(&self) -> f64 {
        let n = self.y.len() as f64;
        -0.5 * self.y.dot(&self.alpha) - 0.5 * self.factor.log_det() - 0.5 * n * LN_2PI
    }

    /// `∂LML/∂K = ½(ααᵀ − K_y⁻¹)`.
    fn adjoint(&self) -> DMatrix<f64> {
        let mut w = &self.alpha * self.alpha.transpose();
        w -= self.factor.inverse();
        w * 0.5
    }
}

/// `log N(y | 0, K + σ_n² I)`.
pub fn log_marginal_likelihood(model: &GpModel) -> Result<f64> {
    Ok(model.condition()?.lml())
}

/// Log prior density of the model's latent field (0 without one).
pub fn latent_log_prior(model: &GpModel) -> Result<f64> {
    model.latent.as_ref().map_or(Ok(0.0), |f| f.log_prior())
}

/// Data term plus lengthscale-field prior for an FGK model.
pub fn map_objective_fgk(model: &GpModel) -> Result<f64> {
    match model.latent.as_ref().map(|f| f.latent_kind()) {
        Some(LatentKind::LogLengthscale) => Ok(log_marginal_likelihood(model)? + latent_log_prior(model)?),
        _ => Err(Error::InvalidConfig("MAP-FGK objective needs a lengthscale field".into())),
    }
}

/// Data term plus matrix-normal prior on `H` for an MGK model.
pub fn map_objective_mgk(model: &GpModel) -> Result<f64> {
    match model.latent.as_ref().map(|f| f.latent_kind()) {
        Some(LatentKind::Covariance) => Ok(log_marginal_likelihood(model)? + latent_log_prior(model)?),
        _ => Err(Error::InvalidConfig("MAP-MGK objective needs a matrix field".into())),
    }
}

/// Closed-form prediction given the latent rows at `x_star` (if any).
fn predict_conditioned(
    model: &GpModel,
    cond: &Conditioned,
    x_star: &Points,
    lat_star: Option<&LatentRows>,
    full_cov: bool,
) -> Result<(Vec<f64>, Vec<f64>, Option<DMatrix<f64>>)> {
    if x_star.dim() != model.train_inputs.dim() {
        return Err(mismatch(format!(
            "test inputs have dimension {}, training inputs {}",
            x_star.dim(),
            model.train_inputs.dim()
        )));
    }
    if x_star.is_empty() {
        return Ok((Vec::new(), Vec::new(), full_cov.then(|| DMatrix::zeros(0, 0))));
    }
    let k_sf = gram(&model.kernel, x_star, &model.train_inputs, lat_star, cond.features.as_ref())?.values;
    let mean: Vec<f64> = (&k_sf * &cond.alpha).iter().copied().collect();
    let v = cond.factor.solve_lower(&k_sf.transpose())?;
    let prior_diag = gram_diag(&model.kernel, x_star, lat_star)?;
    let variance = prior_diag
        .iter()
        .enumerate()
        .map(|(i, k)| (k - v.column(i).norm_squared()).max(0.0))
        .collect();
    let cov = if full_cov {
        let k_ss = gram(&model.kernel, x_star, x_star, lat_star, lat_star)?.values;
        let c = k_ss - v.transpose() * &v;
        Some(crate::linalg::symmetrize(&c))
    } else {
        None
    };
    Ok((mean, variance, cov))
}

fn to_gaussian_space(
    model: &GpModel,
    mean: Vec<f64>,
    variance: Vec<f64>,
    covariance: Option<DMatrix<f64>>,
) -> PredictiveDistribution {
    let s = &model.scaling;
    let s2 = s.scale * s.scale;
    PredictiveDistribution {
        mean: mean.into_iter().map(|m| s.to_gaussian(m)).collect(),
        variance: variance.into_iter().map(|v| v * s2).collect(),
        covariance: covariance.map(|c| c * s2),
        noise_variance: model.noise_variance * s2,
        transform: s.transform,
        mixture: None,
    }
}

/// Latent rows at `x_star` implied by the conditional mean of the field.
fn star_features(model: &GpModel, x_star: &Points) -> Result<Option<LatentRows>> {
    match &model.latent {
        None => Ok(None),
        Some(field) => {
            let values = field.extrapolate(x_star)?;
            Ok(Some(field.features(&values)))
        }
    }
}

/// Gaussian posterior predictive of the latent function at `x_star`.
/// Latent fields are extrapolated to `x_star` by their conditional mean.
pub fn posterior_predictive(model: &GpModel, x_star: &Points, full_cov: bool) -> Result<PredictiveDistribution> {
    let cond = model.condition()?;
    let lat = star_features(model, x_star)?;
    let (mean, var, cov) = predict_conditioned(model, &cond, x_star, lat.as_ref(), full_cov)?;
    Ok(to_gaussian_space(model, mean, var, cov))
}

/// Posterior predictive with explicit latent values at `x_star`.
pub fn predictive_with_latent(model: &GpModel, x_star: &Points, star_values: &DMatrix<f64>) -> Result<PredictiveDistribution> {
    let field = model.latent.as_ref().ok_or(Error::MissingLatentContext)?;
    let cond = model.condition()?;
    let lat = field.features(star_values);
    let (mean, var, _) = predict_conditioned(model, &cond, x_star, Some(&lat), false)?;
    Ok(to_gaussian_space(model, mean, var, None))
}

/// Monte-Carlo predictive: the latent field at `x_star` is sampled `j`
/// times from its conditional and the closed-form predictives are mixed.
/// Returns mixture moments plus the component moments.
pub fn predictive_mc(model: &GpModel, x_star: &Points, j: usize, seed: u64) -> Result<PredictiveDistribution> {
    let field = model.latent.as_ref().ok_or(Error::MissingLatentContext)?;
    let draws = sample_conditional_h(field, x_star, j, seed)?;
    let cond = model.condition()?;
    let mut means = Vec::with_capacity(j);
    let mut variances = Vec::with_capacity(j);
    for values in &draws {
        let lat = field.features(values);
        let (m, v, _) = predict_conditioned(model, &cond, x_star, Some(&lat), false)?;
        let p = to_gaussian_space(model, m, v, None);
        means.push(p.mean);
        variances.push(p.variance);
    }
    let n = x_star.len();
    let jf = j as f64;
    let mut mean = vec![0.0; n];
    let mut second = vec![0.0; n];
    for (m, v) in means.iter().zip(&variances) {
        for i in 0..n {
            mean[i] += m[i] / jf;
            second[i] += (v[i] + m[i] * m[i]) / jf;
        }
    }
    let variance = (0..n).map(|i| (second[i] - mean[i] * mean[i]).max(0.0)).collect();
    let s = &model.scaling;
    Ok(PredictiveDistribution {
        mean,
        variance,
        covariance: None,
        noise_variance: model.noise_variance * s.scale * s.scale,
        transform: s.transform,
        mixture: Some(MixtureComponents { means, variances }),
    })
}

/// Log-normal forecast: median and requested quantiles per point.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LognormalForecast {
    pub median: Vec<f64>,
    pub levels: Vec<f64>,
    /// `quantiles[k][i]` is level `levels[k]` at point `i`.
    pub quantiles: Vec<Vec<f64>>,
}

pub fn lognormal_predict(model: &GpModel, x_star: &Points, levels: &[f64]) -> Result<LognormalForecast> {
    if model.scaling.transform != TargetTransform::Log {
        return Err(Error::InvalidConfig("log-normal prediction needs a log target transform".into()));
    }
    let pred = posterior_predictive(model, x_star, false)?;
    lognormal_from(&pred, levels)
}

pub fn lognormal_from(pred: &PredictiveDistribution, levels: &[f64]) -> Result<LognormalForecast> {
    let quantiles = levels.iter().map(|&q| pred.quantile(q)).collect::<Result<Vec<_>>>()?;
    Ok(LognormalForecast {
        median: pred.mean.iter().map(|m| m.exp()).collect(),
        levels: levels.to_vec(),
        quantiles,
    })
}

/// Which parts of an exact model are optimised.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Trainable {
    pub kernel: bool,
    pub noise: bool,
    pub latent: bool,
}

impl Default for Trainable {
    fn default() -> Self {
        Self {
            kernel: true,
            noise: true,
            latent: true,
        }
    }
}

/// Negative log posterior of an exact model as a function of its
/// unconstrained parameters:
/// `[log kernel hypers | log σ_n² | field block (row-major) | softplus⁻¹ Ω]`.
/// Frozen blocks are omitted from the vector.
///
/// The field block holds either the field values themselves or, when
/// whitened, `V` with `values = μ + L V Rᵀ` for `K_a = LLᵀ`, `Ψ = RRᵀ`.
/// Whitening leaves the objective unchanged but removes the conditioning
/// of `K_a` from the optimisation geometry.
pub struct ExactObjective {
    template: GpModel,
    trainable: Trainable,
    field_factors: Option<(CholeskyFactor, CholeskyFactor)>,
    whiten: bool,
}

impl ExactObjective {
    /// Whitened field coordinates.
    pub fn new(model: &GpModel, trainable: Trainable) -> Result<Self> {
        Self::build(model, trainable, true)
    }

    /// Field values as raw coordinates.
    pub fn unwhitened(model: &GpModel, trainable: Trainable) -> Result<Self> {
        Self::build(model, trainable, false)
    }

    fn build(model: &GpModel, trainable: Trainable, whiten: bool) -> Result<Self> {
        model.validate()?;
        if let Some(f) = &model.latent {
            if f.anchors != model.train_inputs {
                return Err(Error::InvalidConfig("latent field must be anchored at the training inputs".into()));
            }
        }
        let field_factors = match &model.latent {
            Some(f) => Some((f.anchor_factor()?, cholesky_psd(&f.prior.column_covariance, LATENT_JITTER)?)),
            None => None,
        };
        Ok(Self {
            template: model.clone(),
            trainable,
            field_factors,
            whiten,
        })
    }

    fn whitened(&self, centred: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let (fk, fp) = self.field_factors.as_ref().expect("field factors");
        let left = fk.solve_lower(centred)?;
        Ok(fp.solve_lower(&left.transpose())?.transpose())
    }

    fn coloured(&self, v: &DMatrix<f64>) -> DMatrix<f64> {
        let (fk, fp) = self.field_factors.as_ref().expect("field factors");
        fk.lower() * v * fp.lower().transpose()
    }

    fn latent_len(&self) -> usize {
        match (&self.template.latent, self.trainable.latent) {
            (Some(f), true) => f.values.len() + f.omega().map_or(0, <[f64]>::len),
            _ => 0,
        }
    }

    pub fn pack(&self, model: &GpModel) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.dim());
        if self.trainable.kernel {
            out.extend(model.kernel.hyperparameters());
        }
        if self.trainable.noise {
            out.push(model.noise_variance.ln());
        }
        if let (Some(f), true) = (&model.latent, self.trainable.latent) {
            let block = if self.whiten {
                self.whitened(&f.values.add_scalar(-f.prior.mean))
                    .expect("anchor factor solves")
            } else {
                f.values.clone()
            };
            for i in 0..block.nrows() {
                out.extend(block.row(i).iter());
            }
            if let Some(omega) = f.omega() {
                out.extend(omega.iter().map(|o| softplus_inv(*o)));
            }
        }
        out
    }

    pub fn unpack(&self, params: &[f64]) -> Result<GpModel> {
        if params.len() != self.dim() {
            return Err(mismatch(format!("expected {} parameters, got {}", self.dim(), params.len())));
        }
        let mut model = self.template.clone();
        let mut at = 0;
        if self.trainable.kernel {
            let nh = model.kernel.n_hyperparameters();
            model.kernel = model.kernel.with_hyperparameters(&params[..nh])?;
            at = nh;
        }
        if self.trainable.noise {
            model.noise_variance = params[at].exp();
            at += 1;
        }
        if let (Some(f), true) = (model.latent.as_mut(), self.trainable.latent) {
            let (n, p) = f.values.shape();
            let block = DMatrix::from_row_slice(n, p, &params[at..at + n * p]);
            f.values = if self.whiten {
                self.coloured(&block).add_scalar(f.prior.mean)
            } else {
                block
            };
            at += n * p;
            if let FieldKind::Matrix { omega } = &mut f.kind {
                for (o, raw) in omega.iter_mut().zip(&params[at..at + p]) {
                    *o = softplus(*raw);
                }
            }
        }
        Ok(model)
    }

    /// Maximised objective and its gradient in the packed coordinates.
    pub fn log_posterior_grad(&self, params: &[f64]) -> Result<(f64, Vec<f64>)> {
        let model = self.unpack(params)?;
        let cond = model.condition()?;
        let mut value = cond.lml();
        let mut grad = vec![0.0; self.dim()];
        let w = cond.adjoint();
        let x = &model.train_inputs;
        let needs_kernel_grad = self.trainable.kernel || self.latent_len() > 0;
        let gg = if needs_kernel_grad {
            Some(gram_backward(
                &model.kernel,
                x,
                x,
                cond.features.as_ref(),
                cond.features.as_ref(),
                &w,
            )?)
        } else {
            None
        };
        let mut at = 0;
        if self.trainable.kernel {
            let gg = gg.as_ref().expect("kernel gradient");
            grad[..gg.hyper.len()].copy_from_slice(&gg.hyper);
            at = gg.hyper.len();
        }
        if self.trainable.noise {
            grad[at] = w.trace() * model.noise_variance;
            at += 1;
        }
        if let Some(field) = &model.latent {
            let (fk, fp) = self.field_factors.as_ref().expect("field factors");
            let centred = field.values.add_scalar(-field.prior.mean);
            let prior = matnorm_parts(&centred, fk, fp)?;
            value += prior.value;
            if self.trainable.latent {
                let gg = gg.as_ref().expect("kernel gradient");
                let d_feat: Vec<f64> = gg.rows_latent.iter().zip(&gg.cols_latent).map(|(a, b)| a + b).collect();
                let (d_values, d_omega) = field.features_backward(&field.values, &d_feat);
                let (n, p) = field.values.shape();
                let mut d_block = d_values - &prior.kinv_h_psiinv;
                if self.whiten {
                    d_block = fk.lower().transpose() * d_block * fp.lower();
                }
                for i in 0..n {
                    for c in 0..p {
                        grad[at + i * p + c] = d_block[(i, c)];
                    }
                }
                at += n * p;
                if let FieldKind::Matrix { omega } = &field.kind {
                    for c in 0..p {
                        let raw = softplus_inv(omega[c]);
                        grad[at + c] = d_omega[c] * sigmoid(raw);
                    }
                }
            }
        }
        Ok((value, grad))
    }

    pub fn template(&self) -> &GpModel {
        &self.template
    }
}

impl Objective for ExactObjective {
    fn dim(&self) -> usize {
        let nh = if self.trainable.kernel {
            self.template.kernel.n_hyperparameters()
        } else {
            0
        };
        nh + usize::from(self.trainable.noise) + self.latent_len()
    }

    fn value_grad(&self, params: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (v, g) = self.log_posterior_grad(params)?;
        Ok((-v, g.into_iter().map(|e| -e).collect()))
    }
}

/// Maximises the marginal likelihood (stationary kernels) or the MAP
/// objective (latent-field kernels). The trace records the maximised objective.
pub fn fit_exact(model: &GpModel, trainable: Trainable, config: &OptimConfig) -> Result<(GpModel, TrainTrace)> {
    let objective = ExactObjective::new(model, trainable)?;
    let start = objective.pack(model);
    let (best, trace) = minimize(&objective, &start, config)?;
    Ok((objective.unpack(&best)?, trace.negated()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::latent::FieldPrior;
    use crate::optim::grad_check;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_points(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Points {
        Points::new(n, d, (0..n * d).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap()
    }

    fn dense_lml(k: &DMatrix<f64>, y: &[f64]) -> f64 {
        let y = DVector::from_column_slice(y);
        let inv = k.clone().try_inverse().unwrap();
        -0.5 * (y.transpose() * inv * &y)[(0, 0)] - 0.5 * k.determinant().ln() - 0.5 * y.len() as f64 * LN_2PI
    }

    fn se_model(x: Points, y: Vec<f64>, noise: f64) -> GpModel {
        let d = x.dim();
        GpModel::new(KernelSpec::se_ard(1.0, vec![1.0; d], (0..d).collect()), noise, x, y, None).unwrap()
    }

    #[test]
    fn lml_scalar_examples() {
        let x = Points::from_1d(&[0.0]);
        let m = se_model(x.clone(), vec![0.0], 1e-12);
        assert_relative_eq!(log_marginal_likelihood(&m).unwrap(), -0.91894, epsilon = 1e-5);
        let m = se_model(x, vec![2.0], 1.0);
        assert_relative_eq!(log_marginal_likelihood(&m).unwrap(), -2.26551, epsilon = 1e-5);
    }

    #[test]
    fn lml_matches_dense_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_points(&mut rng, 5, 2);
        let y: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let kernel = KernelSpec::se_ard(1.3, vec![0.7, 1.9], vec![0, 1]);
        let m = GpModel::new(kernel.clone(), 0.2, x.clone(), y.clone(), None).unwrap();
        let mut k = gram(&kernel, &x, &x, None, None).unwrap().values;
        for i in 0..5 {
            k[(i, i)] += 0.2;
        }
        assert_relative_eq!(log_marginal_likelihood(&m).unwrap(), dense_lml(&k, &y), epsilon = 1e-8);
    }

    fn fgk_model(rng: &mut ChaCha8Rng, n: usize, d: usize) -> GpModel {
        let x = rand_points(rng, n, d);
        let y = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let prior = FieldPrior::lengthscale_default(&x, (0..d).collect(), d).unwrap();
        let vals = DMatrix::from_fn(n, d, |_, _| prior.mean + rng.gen_range(-0.5..0.5));
        let field = LatentField::lengthscale(x.clone(), vals, prior).unwrap();
        let kernel = KernelSpec::product(KernelSpec::constant(1.4), KernelSpec::fgk((0..d).collect()));
        GpModel::new(kernel, 0.1, x, y, Some(field)).unwrap()
    }

    fn mgk_model(rng: &mut ChaCha8Rng, n: usize, d: usize) -> GpModel {
        let x = rand_points(rng, n, d);
        let y = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let prior = FieldPrior::matrix_default(&x, (0..d).collect(), d);
        let field = LatentField::matrix_random_init(x.clone(), d, prior, 0.5, 0.3, rng.gen()).unwrap();
        let kernel = KernelSpec::mgk((0..d).collect());
        GpModel::new(kernel, 0.1, x, y, Some(field)).unwrap()
    }

    #[test]
    fn map_objectives_decompose() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = fgk_model(&mut rng, 6, 2);
        let field = m.latent.as_ref().unwrap();
        // independent recomputation of both parts
        let lengths = field.values.map(f64::exp);
        let mut k = DMatrix::from_fn(6, 6, |i, j| {
            1.4 * crate::kernels::k_fgk(
                m.train_inputs.row(i),
                m.train_inputs.row(j),
                &lengths.row(i).iter().copied().collect::<Vec<_>>(),
                &lengths.row(j).iter().copied().collect::<Vec<_>>(),
            )
            .unwrap()
        });
        for i in 0..6 {
            k[(i, i)] += 0.1;
        }
        let ka = gram(&field.prior.kernel(), &field.anchors, &field.anchors, None, None).unwrap().values;
        let prior: f64 = (0..2)
            .map(|d| {
                let r: Vec<f64> = field.values.column(d).iter().map(|v| v - field.prior.mean).collect();
                dense_lml(&ka, &r)
            })
            .sum();
        let got = map_objective_fgk(&m).unwrap();
        assert_relative_eq!(got, dense_lml(&k, &m.train_targets) + prior, epsilon = 1e-8);
        assert!(map_objective_mgk(&m).is_err());

        // the prior term falls as the deviation from its mean grows
        let mut zero = m.clone();
        zero.train_targets = vec![0.0; 6];
        let prior_at = |offset: f64, model: &mut GpModel| {
            let f = model.latent.as_mut().unwrap();
            f.values = DMatrix::from_element(6, 2, f.prior.mean + offset);
            let total = map_objective_fgk(model).unwrap();
            total - log_marginal_likelihood(model).unwrap()
        };
        let at_mode = prior_at(0.0, &mut zero);
        let off = prior_at(0.3, &mut zero);
        let further = prior_at(0.6, &mut zero);
        assert!(at_mode > off && off > further);
    }

    #[test]
    fn mgk_objective_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = mgk_model(&mut rng, 6, 2);
        let prior = latent_log_prior(&m).unwrap();
        let total = map_objective_mgk(&m).unwrap();
        assert_relative_eq!(total, log_marginal_likelihood(&m).unwrap() + prior, epsilon = 1e-12);
        let mut scaled = m.clone();
        scaled.train_targets.iter_mut().for_each(|v| *v *= 10.0);
        assert_relative_eq!(latent_log_prior(&scaled).unwrap(), prior, epsilon = 1e-14);
        assert!((map_objective_mgk(&scaled).unwrap() - total).abs() > 1e-3);
    }

    #[test]
    fn gradients_match_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for case in 0..3 {
            let m = match case {
                0 => {
                    let x = rand_points(&mut rng, 6, 2);
                    let y = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
                    GpModel::new(KernelSpec::se_ard(1.2, vec![0.8, 1.5], vec![0, 1]), 0.3, x, y, None).unwrap()
                }
                1 => fgk_model(&mut rng, 7, 2),
                _ => mgk_model(&mut rng, 7, 2),
            };
            for obj in [
                ExactObjective::new(&m, Trainable::default()).unwrap(),
                ExactObjective::unwhitened(&m, Trainable::default()).unwrap(),
            ] {
                let report = grad_check(&obj, &obj.pack(&m), 1e-5, 1e-4).unwrap();
                assert!(report.passed, "case {case}: {report:?}");
            }
        }
    }

    #[test]
    fn whitening_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let m = fgk_model(&mut rng, 6, 2);
        let obj = ExactObjective::new(&m, Trainable::default()).unwrap();
        let back = obj.unpack(&obj.pack(&m)).unwrap();
        let diff = &back.latent.as_ref().unwrap().values - &m.latent.as_ref().unwrap().values;
        assert!(diff.amax() < 1e-9);
        let raw = ExactObjective::unwhitened(&m, Trainable::default()).unwrap();
        let a = obj.log_posterior_grad(&obj.pack(&m)).unwrap().0;
        let b = raw.log_posterior_grad(&raw.pack(&m)).unwrap().0;
        assert!((a - b).abs() < 1e-8 * a.abs().max(1.0));
    }

    #[test]
    fn fgk_with_constant_field_is_se() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_points(&mut rng, 8, 2);
        let y: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let ls = [0.7, 0.7];
        let se = GpModel::new(KernelSpec::se_ard(1.0, ls.to_vec(), vec![0, 1]), 0.05, x.clone(), y.clone(), None).unwrap();
        let mut prior = FieldPrior::lengthscale_default(&x, vec![0, 1], 2).unwrap();
        prior.mean = ls[0].ln();
        let vals = DMatrix::from_fn(8, 2, |_, c| ls[c].ln());
        let field = LatentField::lengthscale(x.clone(), vals, prior).unwrap();
        let fgk = GpModel::new(KernelSpec::fgk(vec![0, 1]), 0.05, x, y, Some(field)).unwrap();
        assert!((log_marginal_likelihood(&se).unwrap() - log_marginal_likelihood(&fgk).unwrap()).abs() < 1e-10);
        let stars = rand_points(&mut rng, 4, 2);
        let a = posterior_predictive(&se, &stars, false).unwrap();
        let b = posterior_predictive(&fgk, &stars, false).unwrap();
        for i in 0..4 {
            assert!((a.mean[i] - b.mean[i]).abs() < 1e-10);
            assert!((a.variance[i] - b.variance[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn predictive_limits() {
        let x = Points::from_1d(&[0.0, 1.0, 2.5, 4.0]);
        let y = vec![0.3, -0.8, 1.1, 0.2];
        let m = se_model(x.clone(), y.clone(), 1e-10);
        let p = posterior_predictive(&m, &x, true).unwrap();
        for i in 0..4 {
            assert!((p.mean[i] - y[i]).abs() < 1e-4);
            assert!(p.variance[i] < 1e-4);
        }
        let far = posterior_predictive(&m, &Points::from_1d(&[200.0]), false).unwrap();
        assert!(far.mean[0].abs() < 1e-3);
        assert!((far.variance[0] - 1.0).abs() < 1e-3);
        let empty = posterior_predictive(&m, &Points::empty(1), false).unwrap();
        assert!(empty.is_empty());
    }

    #[test]
    fn predictive_matches_dense_oracle() {
        let xs = [0.0, 0.5, 1.5];
        let y = vec![1.0, -0.5, 0.25];
        let m = se_model(Points::from_1d(&xs), y.clone(), 0.1);
        let p = posterior_predictive(&m, &Points::from_1d(&[0.9]), false).unwrap();
        let se = |a: f64, b: f64| (-0.5 * (a - b) * (a - b)).exp();
        let k = DMatrix::from_fn(3, 3, |i, j| se(xs[i], xs[j]) + if i == j { 0.1 } else { 0.0 });
        let inv = k.try_inverse().unwrap();
        let ks = DVector::from_fn(3, |j, _| se(0.9, xs[j]));
        let mean = (ks.transpose() * &inv * DVector::from_vec(y))[(0, 0)];
        let var = 1.0 - (ks.transpose() * &inv * &ks)[(0, 0)];
        assert_relative_eq!(p.mean[0], mean, epsilon = 1e-8);
        assert_relative_eq!(p.variance[0], var, epsilon = 1e-8);
    }

    #[test]
    fn monte_carlo_predictive() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let m = mgk_model(&mut rng, 6, 2);
        let stars = rand_points(&mut rng, 3, 2);

        let one = predictive_mc(&m, &stars, 1, 9).unwrap();
        let h = sample_conditional_h(m.latent.as_ref().unwrap(), &stars, 1, 9).unwrap();
        let direct = predictive_with_latent(&m, &stars, &h[0]).unwrap();
        for i in 0..3 {
            assert_relative_eq!(one.mean[i], direct.mean[i], epsilon = 1e-12);
            assert_relative_eq!(one.variance[i], direct.variance[i], epsilon = 1e-12);
        }

        // at the anchors the conditional collapses onto the MAP field
        let at = predictive_mc(&m, &m.train_inputs, 7, 1).unwrap();
        let closed = posterior_predictive(&m, &m.train_inputs, false).unwrap();
        for i in 0..6 {
            assert!((at.mean[i] - closed.mean[i]).abs() < 1e-5);
        }

        let a = predictive_mc(&m, &stars, 400, 3).unwrap();
        let b = predictive_mc(&m, &stars, 4000, 4).unwrap();
        let again = predictive_mc(&m, &stars, 400, 3).unwrap();
        assert_eq!(a, again);
        let comp = b.mixture.as_ref().unwrap();
        for i in 0..3 {
            let sd = {
                let mu = b.mean[i];
                let var = comp.means.iter().map(|m| (m[i] - mu).powi(2)).sum::<f64>() / 4000.0;
                var.sqrt()
            };
            let stderr = sd * (1.0 / 400.0 + 1.0 / 4000.0f64).sqrt();
            assert!((a.mean[i] - b.mean[i]).abs() <= 3.0 * stderr + 1e-12, "point {i}");
        }
    }

    #[test]
    fn lognormal_examples() {
        let pred = PredictiveDistribution {
            mean: vec![0.0],
            variance: vec![1.0],
            covariance: None,
            noise_variance: 0.0,
            transform: TargetTransform::Log,
            mixture: None,
        };
        let f = lognormal_from(&pred, &[0.5, 0.841_344_746]).unwrap();
        assert_relative_eq!(f.quantiles[0][0], 1.0, epsilon = 1e-12);
        assert_relative_eq!(f.median[0], 1.0, epsilon = 1e-12);
        assert_relative_eq!(f.quantiles[1][0], std::f64::consts::E, epsilon = 1e-4);

        let x = Points::from_1d(&[0.0, 1.0, 2.0, 3.0]);
        let y = vec![3.5; 4];
        let scaling = TargetScaling::fit(TargetTransform::Log, &y).unwrap();
        let t = scaling.forward(&y).unwrap();
        let m = se_model(x.clone(), t, 0.01).with_scaling(scaling);
        let f = lognormal_predict(&m, &x, &[0.05, 0.95]).unwrap();
        for i in 0..4 {
            assert_relative_eq!(f.median[i], 3.5, epsilon = 1e-9);
            assert!(f.quantiles[0][i] > 0.0);
        }
        assert!(matches!(
            TargetScaling::fit(TargetTransform::Log, &[1.0, 0.0]),
            Err(Error::NonPositiveTarget { row: 1, .. })
        ));
    }

    #[test]
    fn ml2_fit_improves_lml() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let xs: Vec<f64> = (0..20).map(|i| i as f64 * 0.3).collect();
        let y: Vec<f64> = xs.iter().map(|x| x.sin() + 0.05 * rng.gen_range(-1.0..1.0)).collect();
        let m = se_model(Points::from_1d(&xs), y, 0.5);
        let (fit, trace) = fit_exact(&m, Trainable::default(), &OptimConfig::lbfgs()).unwrap();
        assert!(log_marginal_likelihood(&fit).unwrap() > log_marginal_likelihood(&m).unwrap() + 1.0);
        assert!(fit.noise_variance < 0.05);
        assert!(trace.objective_per_iter.iter().all(|v| v.is_finite()));
    }
}
