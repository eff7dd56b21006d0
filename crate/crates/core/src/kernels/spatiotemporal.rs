//! Additive spatio-temporal kernel over `(lat, lon, t)` inputs.
//!
//! `k = k_SE(space)·k_PER(t) + k_space`, where the spatial term is either a
//! stationary SE-ARD kernel or a factorised Gibbs kernel with one lengthscale
//! field per spatial axis.

use serde::{Deserialize, Serialize};

use super::{k_fgk, k_periodic, k_se_ard, KernelSpec};
use crate::error::{mismatch, Error, Result};

pub const LAT: usize = 0;
pub const LON: usize = 1;
pub const TIME: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum SpatialComponent {
    Stationary { signal_variance: f64, lengthscales: [f64; 2] },
    /// Gibbs kernel; lengthscales are supplied per evaluation.
    Gibbs,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpatioTemporal {
    /// Amplitude and (lat, lon) lengthscales of the SE factor modulating the periodic term.
    pub temporal_signal_variance: f64,
    pub temporal_lengthscales: [f64; 2],
    pub periodic_signal_variance: f64,
    pub periodic_lengthscale: f64,
    pub period: f64,
    pub spatial: SpatialComponent,
}

impl SpatioTemporal {
    /// Equivalent composition tree over inputs ordered `(lat, lon, t)`.
    pub fn to_kernel_spec(&self) -> KernelSpec {
        let temporal = KernelSpec::product(
            KernelSpec::se_ard(
                self.temporal_signal_variance,
                self.temporal_lengthscales.to_vec(),
                vec![LAT, LON],
            ),
            KernelSpec::periodic(
                self.periodic_signal_variance,
                self.periodic_lengthscale,
                self.period,
                TIME,
            ),
        );
        let spatial = match &self.spatial {
            SpatialComponent::Stationary {
                signal_variance,
                lengthscales,
            } => KernelSpec::se_ard(*signal_variance, lengthscales.to_vec(), vec![LAT, LON]),
            SpatialComponent::Gibbs => KernelSpec::fgk(vec![LAT, LON]),
        };
        KernelSpec::sum(temporal, spatial)
    }
}

/// Evaluates the spatio-temporal kernel on one pair of `(lat, lon, t)` inputs.
///
/// `gibbs_lengthscales` carries the (lat, lon) lengthscales at `xi` and `xj`
/// and is required exactly when the spatial component is Gibbs.
pub fn k_spatiotemporal(
    xi: &[f64],
    xj: &[f64],
    params: &SpatioTemporal,
    gibbs_lengthscales: Option<(&[f64], &[f64])>,
) -> Result<f64> {
    if xi.len() != 3 || xj.len() != 3 {
        return Err(mismatch("spatio-temporal inputs are (lat, lon, t)"));
    }
    let si = &xi[LAT..=LON];
    let sj = &xj[LAT..=LON];
    let temporal = k_se_ard(si, sj, params.temporal_signal_variance, &params.temporal_lengthscales)?
        * k_periodic(
            xi[TIME],
            xj[TIME],
            params.periodic_signal_variance,
            params.periodic_lengthscale,
            params.period,
        );
    let spatial = match (&params.spatial, gibbs_lengthscales) {
        (
            SpatialComponent::Stationary {
                signal_variance,
                lengthscales,
            },
            _,
        ) => k_se_ard(si, sj, *signal_variance, lengthscales)?,
        (SpatialComponent::Gibbs, Some((li, lj))) => k_fgk(si, sj, li, lj)?,
        (SpatialComponent::Gibbs, None) => return Err(Error::MissingLatentContext),
    };
    Ok(temporal + spatial)
}
