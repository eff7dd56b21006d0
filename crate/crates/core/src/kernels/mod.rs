//! Covariance functions and their sum/product compositions.

mod functions;
mod gram;
mod quadrature;
mod spatiotemporal;

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{mismatch, Error, Result};

pub use functions::{k_fgk, k_mgk, k_periodic, k_se_ard, LOG_LENGTHSCALE_CLAMP};
pub use gram::{diag_backward, gram, gram_backward, gram_diag, gram_serial, GramGrad, GramMatrix};
pub use quadrature::{mgk_integral, QuadratureGrid};
pub use spatiotemporal::{k_spatiotemporal, SpatioTemporal, SpatialComponent};

pub(crate) use functions::clamp_log;

/// Composable kernel description. Amplitudes and lengthscales are stored in
/// natural (positive) units; optimisers work on their logarithms through
/// [`KernelSpec::hyperparameters`] and [`KernelSpec::with_hyperparameters`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum KernelSpec {
    SeArd {
        signal_variance: f64,
        lengthscales: Vec<f64>,
        #[serde(default)]
        active_dims: Vec<usize>,
    },
    Periodic {
        signal_variance: f64,
        lengthscale: f64,
        period: f64,
        #[serde(default)]
        active_dims: Vec<usize>,
    },
    /// Constant covariance, used to give Gibbs nodes an amplitude.
    Constant { variance: f64 },
    /// Factorised Gibbs kernel; lengthscales come from the model's latent field.
    Fgk { active_dims: Vec<usize> },
    /// Multivariate Gibbs kernel; Σ(x) comes from the model's latent field.
    Mgk { active_dims: Vec<usize> },
    Sum {
        left: Box<KernelSpec>,
        right: Box<KernelSpec>,
    },
    Product {
        left: Box<KernelSpec>,
        right: Box<KernelSpec>,
    },
}

/// What a kernel tree needs from the latent field, if anything.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentKind {
    /// Per-input log-lengthscales, one per active dimension.
    LogLengthscale,
    /// Per-input covariance matrices Σ(x).
    Covariance,
}

/// Latent values at a set of inputs, as consumed by Gibbs nodes.
///
/// For [`LatentKind::LogLengthscale`] each row holds `P` log-lengthscales;
/// for [`LatentKind::Covariance`] each row holds a `P×P` matrix (row-major).
#[derive(Clone, Debug, PartialEq)]
pub struct LatentRows {
    kind: LatentKind,
    p: usize,
    data: Vec<f64>,
}

impl LatentRows {
    pub fn log_lengthscales(p: usize, data: Vec<f64>) -> Result<Self> {
        if p == 0 || data.len() % p != 0 {
            return Err(mismatch("log-lengthscale rows must have a fixed positive width"));
        }
        Ok(Self {
            kind: LatentKind::LogLengthscale,
            p,
            data,
        })
    }

    pub fn covariances(p: usize, data: Vec<f64>) -> Result<Self> {
        if p == 0 || data.len() % (p * p) != 0 {
            return Err(mismatch("covariance rows must hold P×P entries"));
        }
        Ok(Self {
            kind: LatentKind::Covariance,
            p,
            data,
        })
    }

    pub fn kind(&self) -> LatentKind {
        self.kind
    }

    /// Number of active dimensions the field serves.
    pub fn p(&self) -> usize {
        self.p
    }

    /// Values stored per input.
    pub fn width(&self) -> usize {
        match self.kind {
            LatentKind::LogLengthscale => self.p,
            LatentKind::Covariance => self.p * self.p,
        }
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.width()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.width();
        &self.data[i * w..(i + 1) * w]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

/// Inputs to one kernel evaluation.
#[derive(Clone, Copy)]
pub(crate) struct Pair<'a> {
    pub xi: &'a [f64],
    pub xj: &'a [f64],
    pub li: Option<&'a [f64]>,
    pub lj: Option<&'a [f64]>,
}

/// Gradient sinks for one kernel evaluation.
pub(crate) struct PairGrad<'a> {
    pub hyper: &'a mut [f64],
    pub dxi: &'a mut [f64],
    pub dxj: &'a mut [f64],
    pub dli: &'a mut [f64],
    pub dlj: &'a mut [f64],
}

fn gather(x: &[f64], dims: &[usize], buf: &mut [f64]) {
    for (b, &d) in buf.iter_mut().zip(dims) {
        *b = x[d];
    }
}

const STACK_DIMS: usize = 8;

impl KernelSpec {
    pub fn se_ard(signal_variance: f64, lengthscales: Vec<f64>, active_dims: Vec<usize>) -> Self {
        KernelSpec::SeArd {
            signal_variance,
            lengthscales,
            active_dims,
        }
    }

    pub fn periodic(signal_variance: f64, lengthscale: f64, period: f64, dim: usize) -> Self {
        KernelSpec::Periodic {
            signal_variance,
            lengthscale,
            period,
            active_dims: vec![dim],
        }
    }

    pub fn constant(variance: f64) -> Self {
        KernelSpec::Constant { variance }
    }

    pub fn fgk(active_dims: Vec<usize>) -> Self {
        KernelSpec::Fgk { active_dims }
    }

    pub fn mgk(active_dims: Vec<usize>) -> Self {
        KernelSpec::Mgk { active_dims }
    }

    pub fn sum(left: KernelSpec, right: KernelSpec) -> Self {
        KernelSpec::Sum {
            left: Box::new(left),
            right: Box::new(right),
        }
    }

    pub fn product(left: KernelSpec, right: KernelSpec) -> Self {
        KernelSpec::Product {
            left: Box::new(left),
            right: Box::new(right),
        }
    }

    /// Fills omitted `active_dims` on stationary leaves with `0..n`.
    pub fn with_default_dims(mut self) -> Self {
        self.fill_dims();
        self
    }

    fn fill_dims(&mut self) {
        match self {
            KernelSpec::SeArd {
                lengthscales,
                active_dims,
                ..
            } if active_dims.is_empty() => *active_dims = (0..lengthscales.len()).collect(),
            KernelSpec::Periodic { active_dims, .. } if active_dims.is_empty() => *active_dims = vec![0],
            KernelSpec::Sum { left, right } | KernelSpec::Product { left, right } => {
                left.fill_dims();
                right.fill_dims();
            }
            _ => {}
        }
    }

    /// Checks positivity, dimension indices and latent-field consistency for
    /// inputs of dimension `input_dim`.
    pub fn validate(&self, input_dim: usize) -> Result<()> {
        self.validate_node(input_dim, "$")?;
        self.latent_requirement()?;
        Ok(())
    }

    fn validate_node(&self, input_dim: usize, path: &str) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::InvalidConfig(format!("{path}.{name} must be positive, got {v}")))
            }
        };
        let dims_ok = |dims: &[usize]| -> Result<()> {
            if dims.is_empty() {
                return Err(Error::InvalidConfig(format!("{path}.active_dims is empty")));
            }
            for (k, &d) in dims.iter().enumerate() {
                if d >= input_dim {
                    return Err(Error::InvalidConfig(format!(
                        "{path}.active_dims[{k}] = {d} exceeds input dimension {input_dim}"
                    )));
                }
                if dims[..k].contains(&d) {
                    return Err(Error::InvalidConfig(format!(
                        "{path}.active_dims repeats dimension {d}"
                    )));
                }
            }
            Ok(())
        };
        match self {
            KernelSpec::SeArd {
                signal_variance,
                lengthscales,
                active_dims,
            } => {
                positive("signal_variance", *signal_variance)?;
                for l in lengthscales {
                    positive("lengthscales", *l)?;
                }
                dims_ok(active_dims)?;
                if lengthscales.len() != active_dims.len() {
                    return Err(Error::InvalidConfig(format!(
                        "{path}: {} lengthscales for {} active dims",
                        lengthscales.len(),
                        active_dims.len()
                    )));
                }
            }
            KernelSpec::Periodic {
                signal_variance,
                lengthscale,
                period,
                active_dims,
            } => {
                positive("signal_variance", *signal_variance)?;
                positive("lengthscale", *lengthscale)?;
                positive("period", *period)?;
                dims_ok(active_dims)?;
                if active_dims.len() != 1 {
                    return Err(Error::InvalidConfig(format!(
                        "{path}: periodic kernel acts on exactly one dimension"
                    )));
                }
            }
            KernelSpec::Constant { variance } => positive("variance", *variance)?,
            KernelSpec::Fgk { active_dims } | KernelSpec::Mgk { active_dims } => dims_ok(active_dims)?,
            KernelSpec::Sum { left, right } | KernelSpec::Product { left, right } => {
                left.validate_node(input_dim, &format!("{path}.left"))?;
                right.validate_node(input_dim, &format!("{path}.right"))?;
            }
        }
        Ok(())
    }

    /// The latent field kind and width required by Gibbs nodes, if any.
    ///
    /// All Gibbs nodes in one tree share a single field, so they must agree on
    /// kind and on the number of active dimensions.
    pub fn latent_requirement(&self) -> Result<Option<(LatentKind, usize)>> {
        match self {
            KernelSpec::Fgk { active_dims } => Ok(Some((LatentKind::LogLengthscale, active_dims.len()))),
            KernelSpec::Mgk { active_dims } => Ok(Some((LatentKind::Covariance, active_dims.len()))),
            KernelSpec::Sum { left, right } | KernelSpec::Product { left, right } => {
                match (left.latent_requirement()?, right.latent_requirement()?) {
                    (Some(a), Some(b)) if a != b => Err(Error::InvalidConfig(
                        "Gibbs nodes in one kernel must share the same latent field".into(),
                    )),
                    (a, b) => Ok(a.or(b)),
                }
            }
            _ => Ok(None),
        }
    }

    /// Active dimensions of the (first) Gibbs node, if any.
    pub fn gibbs_dims(&self) -> Option<&[usize]> {
        match self {
            KernelSpec::Fgk { active_dims } | KernelSpec::Mgk { active_dims } => Some(active_dims),
            KernelSpec::Sum { left, right } | KernelSpec::Product { left, right } => {
                left.gibbs_dims().or_else(|| right.gibbs_dims())
            }
            _ => None,
        }
    }

    pub fn is_stationary(&self) -> bool {
        self.gibbs_dims().is_none()
    }

    pub fn n_hyperparameters(&self) -> usize {
        match self {
            KernelSpec::SeArd { lengthscales, .. } => 1 + lengthscales.len(),
            KernelSpec::Periodic { .. } => 3,
            KernelSpec::Constant { .. } => 1,
            KernelSpec::Fgk { .. } | KernelSpec::Mgk { .. } => 0,
            KernelSpec::Sum { left, right } | KernelSpec::Product { left, right } => {
                left.n_hyperparameters() + right.n_hyperparameters()
            }
        }
    }

    /// Log-transformed hyperparameters in depth-first (left before right) order.
    pub fn hyperparameters(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_hyperparameters());
        self.push_hyper(&mut out);
        out
    }

    fn push_hyper(&self, out: &mut Vec<f64>) {
        match self {
            KernelSpec::SeArd {
                signal_variance,
                lengthscales,
                ..
            } => {
                out.push(signal_variance.ln());
                out.extend(lengthscales.iter().map(|l| l.ln()));
            }
            KernelSpec::Periodic {
                signal_variance,
                lengthscale,
                period,
                ..
            } => {
                out.push(signal_variance.ln());
                out.push(lengthscale.ln());
                out.push(period.ln());
            }
            KernelSpec::Constant { variance } => out.push(variance.ln()),
            KernelSpec::Fgk { .. } | KernelSpec::Mgk { .. } => {}
            KernelSpec::Sum { left, right } | KernelSpec::Product { left, right } => {
                left.push_hyper(out);
                right.push_hyper(out);
            }
        }
    }

    /// Copy with hyperparameters replaced by `exp(params)`.
    pub fn with_hyperparameters(&self, params: &[f64]) -> Result<KernelSpec> {
        if params.len() != self.n_hyperparameters() {
            return Err(mismatch(format!(
                "kernel has {} hyperparameters, got {}",
                self.n_hyperparameters(),
                params.len()
            )));
        }
        let mut spec = self.clone();
        let mut it = params.iter().map(|p| p.exp());
        spec.pull_hyper(&mut it);
        Ok(spec)
    }

    fn pull_hyper(&mut self, it: &mut impl Iterator<Item = f64>) {
        match self {
            KernelSpec::SeArd {
                signal_variance,
                lengthscales,
                ..
            } => {
                *signal_variance = it.next().unwrap();
                for l in lengthscales.iter_mut() {
                    *l = it.next().unwrap();
                }
            }
            KernelSpec::Periodic {
                signal_variance,
                lengthscale,
                period,
                ..
            } => {
                *signal_variance = it.next().unwrap();
                *lengthscale = it.next().unwrap();
                *period = it.next().unwrap();
            }
            KernelSpec::Constant { variance } => *variance = it.next().unwrap(),
            KernelSpec::Fgk { .. } | KernelSpec::Mgk { .. } => {}
            KernelSpec::Sum { left, right } | KernelSpec::Product { left, right } => {
                left.pull_hyper(it);
                right.pull_hyper(it);
            }
        }
    }

    pub(crate) fn value(&self, p: &Pair) -> f64 {
        match self {
            KernelSpec::SeArd {
                signal_variance,
                lengthscales,
                active_dims,
            } => {
                let q: f64 = active_dims
                    .iter()
                    .zip(lengthscales)
                    .map(|(&d, l)| {
                        let r = (p.xi[d] - p.xj[d]) / l;
                        r * r
                    })
                    .sum();
                signal_variance * (-0.5 * q).exp()
            }
            KernelSpec::Periodic {
                signal_variance,
                lengthscale,
                period,
                active_dims,
            } => {
                let d = active_dims[0];
                functions::k_periodic(p.xi[d], p.xj[d], *signal_variance, *lengthscale, *period)
            }
            KernelSpec::Constant { variance } => *variance,
            KernelSpec::Fgk { active_dims } => {
                let n = active_dims.len();
                let mut a = [0.0; STACK_DIMS];
                let mut b = [0.0; STACK_DIMS];
                if n <= STACK_DIMS {
                    gather(p.xi, active_dims, &mut a[..n]);
                    gather(p.xj, active_dims, &mut b[..n]);
                    functions::fgk_value_logs(&a[..n], &b[..n], p.li.unwrap(), p.lj.unwrap())
                } else {
                    let a: Vec<f64> = active_dims.iter().map(|&d| p.xi[d]).collect();
                    let b: Vec<f64> = active_dims.iter().map(|&d| p.xj[d]).collect();
                    functions::fgk_value_logs(&a, &b, p.li.unwrap(), p.lj.unwrap())
                }
            }
            KernelSpec::Mgk { active_dims } => {
                let a: Vec<f64> = active_dims.iter().map(|&d| p.xi[d]).collect();
                let b: Vec<f64> = active_dims.iter().map(|&d| p.xj[d]).collect();
                functions::mgk_value(&a, &b, p.li.unwrap(), p.lj.unwrap()).unwrap_or(f64::NAN)
            }
            KernelSpec::Sum { left, right } => left.value(p) + right.value(p),
            KernelSpec::Product { left, right } => left.value(p) * right.value(p),
        }
    }

    /// Adds `w · ∂k/∂(·)` into `g`; this node's hyperparameters start at `offset`.
    pub(crate) fn backward(&self, p: &Pair, w: f64, offset: usize, g: &mut PairGrad) {
        if w == 0.0 {
            return;
        }
        match self {
            KernelSpec::SeArd {
                signal_variance,
                lengthscales,
                active_dims,
            } => {
                let q: f64 = active_dims
                    .iter()
                    .zip(lengthscales)
                    .map(|(&d, l)| {
                        let r = (p.xi[d] - p.xj[d]) / l;
                        r * r
                    })
                    .sum();
                let wk = w * signal_variance * (-0.5 * q).exp();
                g.hyper[offset] += wk;
                for (k, (&d, l)) in active_dims.iter().zip(lengthscales).enumerate() {
                    let r = p.xi[d] - p.xj[d];
                    let l2 = l * l;
                    g.hyper[offset + 1 + k] += wk * r * r / l2;
                    g.dxi[d] -= wk * r / l2;
                    g.dxj[d] += wk * r / l2;
                }
            }
            KernelSpec::Periodic {
                signal_variance,
                lengthscale,
                period,
                active_dims,
            } => {
                let d = active_dims[0];
                let r = p.xi[d] - p.xj[d];
                let u = PI * r / period;
                let s = u.sin();
                let l2 = lengthscale * lengthscale;
                let wk = w * signal_variance * (-2.0 * s * s / l2).exp();
                let sin2u = (2.0 * u).sin();
                g.hyper[offset] += wk;
                g.hyper[offset + 1] += wk * 4.0 * s * s / l2;
                g.hyper[offset + 2] += wk * 2.0 * sin2u * PI * r / (period * l2);
                let dr = wk * (-2.0 / l2) * sin2u * PI / period;
                g.dxi[d] += dr;
                g.dxj[d] -= dr;
            }
            KernelSpec::Constant { variance } => g.hyper[offset] += w * variance,
            KernelSpec::Fgk { active_dims } => {
                let n = active_dims.len();
                let a: Vec<f64> = active_dims.iter().map(|&d| p.xi[d]).collect();
                let b: Vec<f64> = active_dims.iter().map(|&d| p.xj[d]).collect();
                let mut da = vec![0.0; n];
                let mut db = vec![0.0; n];
                functions::fgk_grad_logs(
                    &a,
                    &b,
                    p.li.unwrap(),
                    p.lj.unwrap(),
                    w,
                    &mut da,
                    &mut db,
                    g.dli,
                    g.dlj,
                );
                for (k, &d) in active_dims.iter().enumerate() {
                    g.dxi[d] += da[k];
                    g.dxj[d] += db[k];
                }
            }
            KernelSpec::Mgk { active_dims } => {
                let n = active_dims.len();
                let a: Vec<f64> = active_dims.iter().map(|&d| p.xi[d]).collect();
                let b: Vec<f64> = active_dims.iter().map(|&d| p.xj[d]).collect();
                let mut da = vec![0.0; n];
                let mut db = vec![0.0; n];
                // A failed factorisation already surfaced as NaN in the forward pass.
                let _ = functions::mgk_grad(
                    &a,
                    &b,
                    p.li.unwrap(),
                    p.lj.unwrap(),
                    w,
                    &mut da,
                    &mut db,
                    g.dli,
                    g.dlj,
                );
                for (k, &d) in active_dims.iter().enumerate() {
                    g.dxi[d] += da[k];
                    g.dxj[d] += db[k];
                }
            }
            KernelSpec::Sum { left, right } => {
                left.backward(p, w, offset, g);
                right.backward(p, w, offset + left.n_hyperparameters(), g);
            }
            KernelSpec::Product { left, right } => {
                let lv = left.value(p);
                let rv = right.value(p);
                left.backward(p, w * rv, offset, g);
                right.backward(p, w * lv, offset + left.n_hyperparameters(), g);
            }
        }
    }
}
