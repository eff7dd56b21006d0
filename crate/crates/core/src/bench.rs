//! Stationary versus Gibbs comparison suites over repeated random splits.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{split, synth_nonstationary, ColumnMap, Dataset, SplitLabel, SplitSpec, SynthConfig};
use crate::error::{Error, Result};
use crate::exact::TargetTransform;
use crate::fit::{fit_model, FieldPriorConfig, KernelUnits, ModelConfig, ModelFamily};
use crate::kernels::{gram, KernelSpec, LatentRows, SpatialComponent, SpatioTemporal};
use crate::linalg::cholesky_psd;
use crate::optim::OptimConfig;
use crate::par;
use crate::points::Points;
use crate::rng::substream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    Spatial,
    Temporal,
    Spatiotemporal,
}

impl std::str::FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spatial" => Ok(Suite::Spatial),
            "temporal" => Ok(Suite::Temporal),
            "spatiotemporal" => Ok(Suite::Spatiotemporal),
            other => Err(Error::InvalidConfig(format!(
                "unknown suite `{other}` (expected spatial, temporal or spatiotemporal)"
            ))),
        }
    }
}

/// Synthetic `(lat, lon, month)` grid whose spatial lengthscale is short
/// west of `lon_switch` and long east of it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub lat_cells: usize,
    pub lon_cells: usize,
    /// Grid spacing in degrees.
    pub spacing: f64,
    pub months: usize,
    pub lon_switch: f64,
    pub short_lengthscale: f64,
    pub long_lengthscale: f64,
    pub seasonal_variance: f64,
    pub spatial_variance: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            lat_cells: 5,
            lon_cells: 5,
            spacing: 0.5,
            months: 8,
            lon_switch: 1.0,
            short_lengthscale: 0.5,
            long_lengthscale: 3.0,
            seasonal_variance: 1.0,
            spatial_variance: 1.0,
            noise: 0.01,
            seed: 0,
        }
    }
}

impl GridConfig {
    fn truth(&self) -> SpatioTemporal {
        SpatioTemporal {
            temporal_signal_variance: self.seasonal_variance,
            temporal_lengthscales: [3.0, 3.0],
            periodic_signal_variance: 1.0,
            periodic_lengthscale: 1.0,
            period: 12.0,
            spatial: SpatialComponent::Gibbs,
        }
    }

    pub fn lengthscale_at(&self, lon: f64) -> f64 {
        if lon < self.lon_switch {
            self.short_lengthscale
        } else {
            self.long_lengthscale
        }
    }
}

/// Draws a grid dataset from the additive spatio-temporal kernel with a
/// known Gibbs spatial field. Columns are `lat, lon, time, value`.
pub fn synth_spatiotemporal(config: &GridConfig) -> Result<(Dataset, Vec<f64>)> {
    if config.lat_cells * config.lon_cells == 0 || config.months == 0 {
        return Err(Error::InvalidConfig("grid needs at least one cell and one month".into()));
    }
    for (name, v) in [
        ("spacing", config.spacing),
        ("short_lengthscale", config.short_lengthscale),
        ("long_lengthscale", config.long_lengthscale),
        ("seasonal_variance", config.seasonal_variance),
        ("spatial_variance", config.spatial_variance),
    ] {
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::InvalidConfig(format!("{name} must be positive, got {v}")));
        }
    }
    if !(config.noise >= 0.0) {
        return Err(Error::InvalidConfig(format!("noise must be non-negative, got {}", config.noise)));
    }
    let mut data = Vec::new();
    for t in 0..config.months {
        for a in 0..config.lat_cells {
            for o in 0..config.lon_cells {
                data.extend([a as f64 * config.spacing, o as f64 * config.spacing, t as f64]);
            }
        }
    }
    let n = data.len() / 3;
    let x = Points::new(n, 3, data)?;
    let truth: Vec<f64> = x.rows().map(|r| config.lengthscale_at(r[1])).collect();
    let kernel = KernelSpec::sum(
        match config.truth().to_kernel_spec() {
            KernelSpec::Sum { left, .. } => *left,
            _ => unreachable!("spatio-temporal kernel is a sum"),
        },
        KernelSpec::product(KernelSpec::constant(config.spatial_variance), KernelSpec::fgk(vec![0, 1])),
    );
    let logs: Vec<f64> = truth.iter().flat_map(|l| [l.ln(), l.ln()]).collect();
    let lat = LatentRows::log_lengthscales(2, logs)?;
    let k = gram(&kernel, &x, &x, Some(&lat), Some(&lat))?.values;
    let factor = cholesky_psd(&k, 1e-8)?;
    let mut rng = substream(config.seed, "synth-grid");
    let z = nalgebra::DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let f = factor.lower() * z;
    let y = f
        .iter()
        .map(|v| v + config.noise.sqrt() * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Ok((Dataset::new(ColumnMap::default(), x, y)?, truth))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub splits: usize,
    pub train_fraction: f64,
    /// Synthetic data for the spatial and temporal suites; suite defaults when absent.
    pub synth: Option<SynthConfig>,
    pub grid: GridConfig,
    pub include_mgk: bool,
    pub family: ModelFamily,
    pub inducing_points: usize,
    pub transform: TargetTransform,
    pub field_prior: FieldPriorConfig,
    /// Overrides the per-model optimiser defaults.
    pub optimizer: Option<OptimConfig>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            splits: 10,
            train_fraction: 0.8,
            synth: None,
            grid: GridConfig::default(),
            include_mgk: false,
            family: ModelFamily::Exact,
            inducing_points: 50,
            transform: TargetTransform::None,
            field_prior: FieldPriorConfig::default(),
            optimizer: None,
        }
    }
}

impl BenchConfig {
    pub fn synth_for(&self, suite: Suite) -> SynthConfig {
        self.synth.clone().unwrap_or_else(|| match suite {
            Suite::Spatial => SynthConfig {
                dims: 2,
                short_lengthscale: 0.1,
                long_lengthscale: 0.5,
                ..SynthConfig::default()
            },
            _ => SynthConfig::default(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.splits == 0 {
            return Err(Error::InvalidConfig("splits must be at least 1".into()));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "train_fraction must lie in (0, 1), got {}",
                self.train_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStderr {
    pub mean: f64,
    /// Sample standard deviation over `√n`; zero for a single value.
    pub stderr: f64,
}

impl MeanStderr {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let stderr = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() / n.sqrt()
        } else {
            0.0
        };
        Self { mean, stderr }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitScores {
    pub split: usize,
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    pub rmse: f64,
    pub nlpd: f64,
    pub final_objective: f64,
    /// Pearson correlation of fitted and true log-lengthscales at the test inputs.
    pub lengthscale_correlation: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelRow {
    pub model: String,
    pub rmse: MeanStderr,
    pub nlpd: MeanStderr,
    pub lengthscale_correlation: Option<MeanStderr>,
    pub splits: Vec<SplitScores>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchTable {
    pub suite: Suite,
    pub seed: u64,
    pub splits: usize,
    pub train_fraction: f64,
    pub n_points: usize,
    pub rows: Vec<ModelRow>,
}

/// Data a suite runs on: inputs, targets and, for synthetic data, the true
/// isotropic lengthscale per row.
#[derive(Clone, Debug)]
pub struct BenchData {
    pub dataset: Dataset,
    pub true_lengthscale: Option<Vec<f64>>,
}

pub fn suite_data(suite: Suite, config: &BenchConfig) -> Result<BenchData> {
    Ok(match suite {
        Suite::Spatial | Suite::Temporal => {
            let s = synth_nonstationary(&config.synth_for(suite))?;
            BenchData {
                dataset: s.dataset,
                true_lengthscale: Some(s.true_lengthscale),
            }
        }
        Suite::Spatiotemporal => {
            let (dataset, truth) = synth_spatiotemporal(&config.grid)?;
            BenchData {
                dataset,
                true_lengthscale: Some(truth),
            }
        }
    })
}

/// Model configurations compared by `suite` on `dim`-dimensional inputs.
pub fn suite_models(suite: Suite, config: &BenchConfig, dim: usize) -> Result<Vec<(String, ModelConfig)>> {
    let mut out = Vec::new();
    let with = |kernel: KernelSpec, units: KernelUnits| {
        let mut m = ModelConfig::new(kernel);
        m.family = config.family;
        m.kernel_units = units;
        m.transform = config.transform;
        m.inducing_points = config.inducing_points;
        m.field_prior = config.field_prior;
        m.optimizer = config.optimizer.clone();
        m
    };
    match suite {
        Suite::Spatial | Suite::Temporal => {
            let dims: Vec<usize> = (0..dim).collect();
            out.push((
                "se-ard".into(),
                with(KernelSpec::se_ard(1.0, vec![0.5; dim], dims.clone()), KernelUnits::Normalized),
            ));
            out.push((
                "fgk".into(),
                with(
                    KernelSpec::product(KernelSpec::constant(1.0), KernelSpec::fgk(dims.clone())),
                    KernelUnits::Normalized,
                ),
            ));
            if config.include_mgk {
                out.push((
                    "mgk".into(),
                    with(
                        KernelSpec::product(KernelSpec::constant(1.0), KernelSpec::mgk(dims)),
                        KernelUnits::Normalized,
                    ),
                ));
            }
        }
        Suite::Spatiotemporal => {
            if dim != 3 {
                return Err(Error::InvalidConfig(format!(
                    "spatio-temporal suite needs (lat, lon, time) inputs, got {dim} columns"
                )));
            }
            let base = SpatioTemporal {
                temporal_signal_variance: 1.0,
                temporal_lengthscales: [2.0, 2.0],
                periodic_signal_variance: 1.0,
                periodic_lengthscale: 1.0,
                period: 12.0,
                spatial: SpatialComponent::Stationary {
                    signal_variance: 1.0,
                    lengthscales: [1.0, 1.0],
                },
            };
            out.push(("se-ard+per".into(), with(base.to_kernel_spec(), KernelUnits::Raw)));
            let temporal = match base.to_kernel_spec() {
                KernelSpec::Sum { left, .. } => *left,
                _ => unreachable!("spatio-temporal kernel is a sum"),
            };
            let gibbs = |latent: KernelSpec| {
                KernelSpec::sum(temporal.clone(), KernelSpec::product(KernelSpec::constant(1.0), latent))
            };
            out.push(("fgk+per".into(), with(gibbs(KernelSpec::fgk(vec![0, 1])), KernelUnits::Raw)));
            if config.include_mgk {
                out.push(("mgk+per".into(), with(gibbs(KernelSpec::mgk(vec![0, 1])), KernelUnits::Raw)));
            }
        }
    }
    Ok(out)
}

pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    let r = sab / (saa * sbb).sqrt();
    r.is_finite().then_some(r)
}

fn split_seeds(seed: u64, splits: usize) -> Vec<u64> {
    let mut rng = substream(seed, "bench-splits");
    (0..splits).map(|_| rng.gen()).collect()
}

fn run_one(
    data: &BenchData,
    model: &ModelConfig,
    split_id: usize,
    split_seed: u64,
    fraction: f64,
) -> Result<SplitScores> {
    let ds = split(
        &data.dataset,
        &SplitSpec::Random {
            fraction,
            seed: split_seed,
        },
    )?;
    let train = ds.subset(&ds.indices(SplitLabel::Train)?);
    let test_idx = ds.indices(SplitLabel::Test)?;
    let test = ds.subset(&test_idx);
    let fit = fit_model(model, &train.inputs, &train.targets, split_seed)?;
    let eval = fit.evaluate(&test.inputs, &test.targets, None)?;
    let lengthscale_correlation = match (&data.true_lengthscale, fit.log_lengthscales_at(&test.inputs)?) {
        (Some(truth), Some(fitted)) => {
            let fitted_mean: Vec<f64> = (0..fitted.nrows()).map(|i| fitted.row(i).mean()).collect();
            let true_log: Vec<f64> = test_idx.iter().map(|&i| truth[i].ln()).collect();
            pearson(&fitted_mean, &true_log)
        }
        _ => None,
    };
    Ok(SplitScores {
        split: split_id,
        seed: split_seed,
        n_train: train.len(),
        n_test: test.len(),
        rmse: eval.overall.rmse,
        nlpd: eval.overall.nlpd,
        final_objective: fit.final_objective,
        lengthscale_correlation,
    })
}

/// Runs every suite model on every split. Splits run in parallel unless
/// `serial` is set; both orders produce identical tables.
pub fn run_bench_on(
    suite: Suite,
    config: &BenchConfig,
    data: &BenchData,
    seed: u64,
    serial: bool,
) -> Result<BenchTable> {
    config.validate()?;
    let models = suite_models(suite, config, data.dataset.inputs.dim())?;
    let seeds = split_seeds(seed, config.splits);
    let jobs = models.len() * config.splits;
    let job = |j: usize| {
        let (m, s) = (j / config.splits, j % config.splits);
        run_one(data, &models[m].1, s, seeds[s], config.train_fraction)
    };
    let results = if serial {
        par::map_range_serial(jobs, job)
    } else {
        par::map_range(jobs, job)
    };
    let mut results = results.into_iter();
    let mut rows = Vec::with_capacity(models.len());
    for (name, _) in &models {
        let splits: Vec<SplitScores> = results.by_ref().take(config.splits).collect::<Result<_>>()?;
        let rmse: Vec<f64> = splits.iter().map(|s| s.rmse).collect();
        let nlpd: Vec<f64> = splits.iter().map(|s| s.nlpd).collect();
        let corr: Vec<f64> = splits.iter().filter_map(|s| s.lengthscale_correlation).collect();
        rows.push(ModelRow {
            model: name.clone(),
            rmse: MeanStderr::of(&rmse),
            nlpd: MeanStderr::of(&nlpd),
            lengthscale_correlation: (!corr.is_empty()).then(|| MeanStderr::of(&corr)),
            splits,
        });
    }
    Ok(BenchTable {
        suite,
        seed,
        splits: config.splits,
        train_fraction: config.train_fraction,
        n_points: data.dataset.len(),
        rows,
    })
}

/// Runs `suite` on its synthetic data.
pub fn run_bench(suite: Suite, config: &BenchConfig, seed: u64) -> Result<BenchTable> {
    run_bench_on(suite, config, &suite_data(suite, config)?, seed, false)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stderr_matches_hand_computation() {
        let v = [1.0, 2.0, 4.0, 7.0];
        let m = MeanStderr::of(&v);
        assert_eq!(m.mean, 3.5);
        // deviations -2.5, -1.5, 0.5, 3.5 -> ss 21, var 7
        assert!((m.stderr - (7.0f64).sqrt() / 2.0).abs() < 1e-15);
        assert_eq!(MeanStderr::of(&[2.0]).stderr, 0.0);
    }

    #[test]
    fn pearson_limits() {
        let a = [1.0, 2.0, 3.0];
        assert!((pearson(&a, &[2.0, 4.0, 6.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((pearson(&a, &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-15);
        assert!(pearson(&a, &[1.0, 1.0, 1.0]).is_none());
    }

    #[test]
    fn grid_generator_shape_and_determinism() {
        let g = GridConfig {
            lat_cells: 3,
            lon_cells: 4,
            months: 2,
            ..GridConfig::default()
        };
        let (ds, truth) = synth_spatiotemporal(&g).unwrap();
        assert_eq!(ds.len(), 24);
        assert_eq!(truth.len(), 24);
        assert_eq!(ds.inputs.row(5), &[0.5, 0.5, 0.0]);
        assert_eq!(truth[5], g.short_lengthscale);
        assert_eq!(truth[6], g.long_lengthscale);
        assert_eq!(synth_spatiotemporal(&g).unwrap().0, ds);
    }

    #[test]
    fn unknown_suite_is_config_error() {
        assert!(matches!("nope".parse::<Suite>(), Err(Error::InvalidConfig(_))));
        assert_eq!("temporal".parse::<Suite>().unwrap(), Suite::Temporal);
    }

    #[test]
    fn small_bench_has_one_entry_per_split() {
        let config = BenchConfig {
            splits: 3,
            synth: Some(SynthConfig {
                n_points: 30,
                ..SynthConfig::default()
            }),
            optimizer: Some(OptimConfig {
                max_iters: 20,
                ..OptimConfig::default()
            }),
            ..BenchConfig::default()
        };
        let data = suite_data(Suite::Temporal, &config).unwrap();
        let table = run_bench_on(Suite::Temporal, &config, &data, 9, false).unwrap();
        assert_eq!(table.rows.len(), 2);
        for row in &table.rows {
            assert_eq!(row.splits.len(), 3);
            let rmse: Vec<f64> = row.splits.iter().map(|s| s.rmse).collect();
            assert_eq!(row.rmse, MeanStderr::of(&rmse));
        }
        assert!(table.rows[1].lengthscale_correlation.is_some());
        assert_eq!(run_bench_on(Suite::Temporal, &config, &data, 9, true).unwrap(), table);
    }
}
