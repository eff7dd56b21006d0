//! End-to-end fitting on raw data: normalisation, model construction,
//! optimisation, prediction and scoring.

use serde::{Deserialize, Serialize};

use crate::data::{fingerprint, Fingerprint, Normalization};
use crate::error::{Error, Result};
use crate::exact::{
    fit_exact, posterior_predictive, predictive_mc, GpModel, PredictiveDistribution, TargetTransform, Trainable,
};
use crate::kernels::{KernelSpec, LatentKind};
use crate::latent::{default_field, LatentField};
use crate::metrics::{nlpd, rmse, NlpdOptions};
use crate::optim::{OptimConfig, TrainTrace};
use crate::points::Points;
use crate::sparse::{collapsed_elbo, sparse_fit, sparse_predictive, SparseModel, SparseTrainable};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelFamily {
    #[default]
    Exact,
    Sparse,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LatentFamily {
    None,
    Fgk,
    Mgk,
}

/// Units of the kernel hyperparameters given in a [`ModelConfig`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelUnits {
    /// Lengthscales and periods refer to standardised inputs.
    #[default]
    Normalized,
    /// Lengthscales and periods refer to the raw input columns.
    Raw,
}

fn default_noise() -> f64 {
    0.1
}

fn default_inducing() -> usize {
    50
}

fn default_true() -> bool {
    true
}

/// Fixed hyperparameters of the latent-field prior.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FieldPriorConfig {
    /// Prior SE lengthscale as a fraction of each field input's range.
    pub lengthscale_fraction: f64,
    pub variance: f64,
}

impl Default for FieldPriorConfig {
    fn default() -> Self {
        Self {
            lengthscale_fraction: 0.2,
            variance: 1.0,
        }
    }
}

impl FieldPriorConfig {
    fn validate(&self) -> Result<()> {
        for (name, v) in [("lengthscale_fraction", self.lengthscale_fraction), ("variance", self.variance)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!("field_prior.{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }

    fn apply(&self, field: &mut Option<LatentField>) {
        if let Some(f) = field {
            let defaults = Self::default();
            for l in f.prior.lengthscales.iter_mut() {
                *l *= self.lengthscale_fraction / defaults.lengthscale_fraction;
            }
            f.prior.variance = self.variance;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default)]
    pub family: ModelFamily,
    /// Initial kernel; Gibbs nodes imply a latent field.
    pub kernel: KernelSpec,
    /// Optional cross-check of the latent family implied by `kernel`.
    #[serde(default)]
    pub latent: Option<LatentFamily>,
    #[serde(default)]
    pub kernel_units: KernelUnits,
    #[serde(default)]
    pub field_prior: FieldPriorConfig,
    #[serde(default)]
    pub transform: TargetTransform,
    /// Initial noise variance in standardised target units.
    #[serde(default = "default_noise")]
    pub noise_variance: f64,
    #[serde(default = "default_inducing")]
    pub inducing_points: usize,
    /// Defaults to L-BFGS for exact models and Adam for sparse ones.
    #[serde(default)]
    pub optimizer: Option<OptimConfig>,
    /// Monte-Carlo draws of the latent field at prediction time (0: use its conditional mean).
    #[serde(default)]
    pub mc_samples: usize,
    #[serde(default = "default_true")]
    pub nlpd_jacobian: bool,
}

impl ModelConfig {
    pub fn new(kernel: KernelSpec) -> Self {
        Self {
            family: ModelFamily::Exact,
            kernel,
            latent: None,
            kernel_units: KernelUnits::Normalized,
            field_prior: FieldPriorConfig::default(),
            transform: TargetTransform::None,
            noise_variance: default_noise(),
            inducing_points: default_inducing(),
            optimizer: None,
            mc_samples: 0,
            nlpd_jacobian: true,
        }
    }

    pub fn latent_family(&self) -> Result<LatentFamily> {
        Ok(match self.kernel.latent_requirement()? {
            None => LatentFamily::None,
            Some((LatentKind::LogLengthscale, _)) => LatentFamily::Fgk,
            Some((LatentKind::Covariance, _)) => LatentFamily::Mgk,
        })
    }

    pub fn validate(&self, input_dim: usize) -> Result<()> {
        self.kernel.validate(input_dim)?;
        let implied = self.latent_family()?;
        if let Some(declared) = self.latent {
            if declared != implied {
                return Err(Error::InvalidConfig(format!(
                    "latent family {declared:?} does not match the kernel, which needs {implied:?}"
                )));
            }
        }
        if !(self.noise_variance > 0.0 && self.noise_variance.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "noise_variance must be positive, got {}",
                self.noise_variance
            )));
        }
        if self.family == ModelFamily::Sparse && self.inducing_points == 0 {
            return Err(Error::InvalidConfig("inducing_points must be at least 1".into()));
        }
        if let Some(o) = &self.optimizer {
            o.validate()?;
        }
        self.field_prior.validate()
    }

    pub fn optimizer_for(&self, seed: u64) -> OptimConfig {
        let mut o = self.optimizer.clone().unwrap_or_else(|| {
            if self.family == ModelFamily::Exact {
                OptimConfig::lbfgs()
            } else {
                OptimConfig::default()
            }
        });
        o.seed = seed;
        o
    }
}

/// Divides lengthscales and periods by the per-column input scales.
pub fn kernel_to_normalized(kernel: &KernelSpec, scales: &[f64]) -> KernelSpec {
    match kernel {
        KernelSpec::SeArd {
            signal_variance,
            lengthscales,
            active_dims,
        } => KernelSpec::SeArd {
            signal_variance: *signal_variance,
            lengthscales: lengthscales
                .iter()
                .zip(active_dims)
                .map(|(l, &d)| l / scales[d])
                .collect(),
            active_dims: active_dims.clone(),
        },
        KernelSpec::Periodic {
            signal_variance,
            lengthscale,
            period,
            active_dims,
        } => KernelSpec::Periodic {
            signal_variance: *signal_variance,
            lengthscale: *lengthscale,
            period: period / scales[active_dims[0]],
            active_dims: active_dims.clone(),
        },
        KernelSpec::Sum { left, right } => {
            KernelSpec::sum(kernel_to_normalized(left, scales), kernel_to_normalized(right, scales))
        }
        KernelSpec::Product { left, right } => {
            KernelSpec::product(kernel_to_normalized(left, scales), kernel_to_normalized(right, scales))
        }
        other => other.clone(),
    }
}

/// Everything needed to reproduce predictions from a fit. Kernel
/// hyperparameters, the latent field and inducing inputs are in
/// standardised units; `normalization` maps raw data to them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub family: ModelFamily,
    pub kernel: KernelSpec,
    /// Log-transformed kernel hyperparameters in kernel-tree order.
    pub hyperparameters: Vec<f64>,
    pub noise_variance: f64,
    pub latent: Option<LatentField>,
    pub inducing: Option<Points>,
    pub normalization: Normalization,
    pub train_inputs: Points,
    pub train_targets: Vec<f64>,
    /// Maximised objective (log posterior or collapsed bound) at the returned state.
    pub final_objective: f64,
    pub trace: TrainTrace,
    pub seed: u64,
    pub fingerprint: Fingerprint,
    pub mc_samples: usize,
    pub nlpd_jacobian: bool,
}

/// Fits `config` to raw inputs and targets.
pub fn fit_model(config: &ModelConfig, inputs: &Points, targets: &[f64], seed: u64) -> Result<FitResult> {
    config.validate(inputs.dim())?;
    if inputs.len() != targets.len() {
        return Err(crate::error::mismatch(format!(
            "{} input rows but {} targets",
            inputs.len(),
            targets.len()
        )));
    }
    let norm = Normalization::fit(inputs, targets, config.transform)?;
    let x = norm.inputs(inputs)?;
    let t = norm.targets(targets)?;
    let kernel = match config.kernel_units {
        KernelUnits::Normalized => config.kernel.clone(),
        KernelUnits::Raw => kernel_to_normalized(&config.kernel, &norm.input_scale),
    };
    let optimizer = config.optimizer_for(seed);
    let (kernel, noise, latent, inducing, final_objective, trace, x, t) = match config.family {
        ModelFamily::Exact => {
            let mut latent = default_field(&kernel, &x, x.clone(), seed)?;
            config.field_prior.apply(&mut latent);
            let model = GpModel::new(kernel, config.noise_variance, x, t, latent)?.with_scaling(norm.target.clone());
            let (fitted, trace) = fit_exact(&model, Trainable::default(), &optimizer)?;
            let objective = crate::exact::log_marginal_likelihood(&fitted)? + crate::exact::latent_log_prior(&fitted)?;
            (
                fitted.kernel,
                fitted.noise_variance,
                fitted.latent,
                None,
                objective,
                trace,
                fitted.train_inputs,
                fitted.train_targets,
            )
        }
        ModelFamily::Sparse => {
            let m = config.inducing_points.min(x.len());
            let mut model =
                SparseModel::initialise(kernel, config.noise_variance, x, t, m, seed)?.with_scaling(norm.target.clone());
            config.field_prior.apply(&mut model.latent);
            let (fitted, trace) = sparse_fit(&model, SparseTrainable::default(), &optimizer)?;
            let objective = collapsed_elbo(&fitted)?.total;
            (
                fitted.kernel,
                fitted.noise_variance,
                fitted.latent,
                Some(fitted.inducing),
                objective,
                trace,
                fitted.train_inputs,
                fitted.train_targets,
            )
        }
    };
    Ok(FitResult {
        family: config.family,
        hyperparameters: kernel.hyperparameters(),
        kernel,
        noise_variance: noise,
        latent,
        inducing,
        normalization: norm,
        train_inputs: x,
        train_targets: t,
        final_objective,
        trace,
        seed,
        fingerprint: fingerprint(inputs, targets),
        mc_samples: config.mc_samples,
        nlpd_jacobian: config.nlpd_jacobian,
    })
}

/// Per-regime and overall scores in original target units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub n: usize,
    pub rmse: f64,
    pub nlpd: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegimeScores {
    pub regime: usize,
    #[serde(flatten)]
    pub scores: Scores,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    #[serde(flatten)]
    pub overall: Scores,
    pub per_regime: Vec<RegimeScores>,
}

impl FitResult {
    pub fn exact_model(&self) -> Result<GpModel> {
        Ok(GpModel::new(
            self.kernel.clone(),
            self.noise_variance,
            self.train_inputs.clone(),
            self.train_targets.clone(),
            self.latent.clone(),
        )?
        .with_scaling(self.normalization.target.clone()))
    }

    pub fn sparse_model(&self) -> Result<SparseModel> {
        let z = self
            .inducing
            .clone()
            .ok_or_else(|| Error::InvalidConfig("fit has no inducing inputs".into()))?;
        Ok(SparseModel::new(
            self.kernel.clone(),
            self.noise_variance,
            self.train_inputs.clone(),
            self.train_targets.clone(),
            z,
            self.latent.clone(),
        )?
        .with_scaling(self.normalization.target.clone()))
    }

    /// Log-lengthscales of an FGK field at raw inputs, converted to raw units.
    pub fn log_lengthscales_at(&self, inputs: &Points) -> Result<Option<nalgebra::DMatrix<f64>>> {
        let Some(field) = &self.latent else { return Ok(None) };
        if field.latent_kind() != LatentKind::LogLengthscale {
            return Ok(None);
        }
        let x = self.normalization.inputs(inputs)?;
        let mut values = field.extrapolate(&x)?;
        let dims = self.kernel.gibbs_dims().expect("Gibbs node");
        for (c, &d) in dims.iter().enumerate() {
            let shift = self.normalization.input_scale[d].ln();
            values.column_mut(c).add_scalar_mut(shift);
        }
        Ok(Some(values))
    }

    /// Predictive distribution at raw inputs.
    pub fn predict(&self, inputs: &Points) -> Result<PredictiveDistribution> {
        let x = self.normalization.inputs(inputs)?;
        match self.family {
            ModelFamily::Exact => {
                let model = self.exact_model()?;
                if self.mc_samples > 0 && self.latent.is_some() && !x.is_empty() {
                    predictive_mc(&model, &x, self.mc_samples, self.seed)
                } else {
                    posterior_predictive(&model, &x, false)
                }
            }
            ModelFamily::Sparse => sparse_predictive(&self.sparse_model()?, &x),
        }
    }

    /// RMSE of the point forecast and NLPD of noisy targets, overall and
    /// per regime label when labels are given.
    pub fn evaluate(&self, inputs: &Points, targets: &[f64], regimes: Option<&[usize]>) -> Result<Evaluation> {
        let pred = self.predict(inputs)?;
        score(&pred, targets, regimes, NlpdOptions { jacobian: self.nlpd_jacobian })
    }
}

pub fn score(
    pred: &PredictiveDistribution,
    targets: &[f64],
    regimes: Option<&[usize]>,
    options: NlpdOptions,
) -> Result<Evaluation> {
    let point = pred.point_forecast();
    let overall = Scores {
        n: targets.len(),
        rmse: rmse(&point, targets)?,
        nlpd: nlpd(pred, targets, options)?,
    };
    let mut per_regime = Vec::new();
    if let Some(labels) = regimes {
        if labels.len() != targets.len() {
            return Err(crate::error::mismatch("one regime label per target required"));
        }
        let mut ids: Vec<usize> = labels.to_vec();
        ids.sort_unstable();
        ids.dedup();
        for regime in ids {
            let idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == regime).collect();
            let sub = subset_predictive(pred, &idx);
            let t: Vec<f64> = idx.iter().map(|&i| targets[i]).collect();
            per_regime.push(RegimeScores {
                regime,
                scores: Scores {
                    n: idx.len(),
                    rmse: rmse(&sub.point_forecast(), &t)?,
                    nlpd: nlpd(&sub, &t, options)?,
                },
            });
        }
    }
    Ok(Evaluation { overall, per_regime })
}

fn subset_predictive(pred: &PredictiveDistribution, idx: &[usize]) -> PredictiveDistribution {
    let pick = |v: &[f64]| idx.iter().map(|&i| v[i]).collect::<Vec<_>>();
    PredictiveDistribution {
        mean: pick(&pred.mean),
        variance: pick(&pred.variance),
        covariance: None,
        noise_variance: pred.noise_variance,
        transform: pred.transform,
        mixture: pred.mixture.as_ref().map(|m| crate::exact::MixtureComponents {
            means: m.means.iter().map(|c| pick(c)).collect(),
            variances: m.variances.iter().map(|c| pick(c)).collect(),
        }),
    }
}
