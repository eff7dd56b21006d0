//! The JSON run configuration shared by all subcommands.

use std::path::{Path, PathBuf};

use nsgp::bench::{BenchConfig, GridConfig};
use nsgp::data::{ColumnMap, SplitSpec, SynthConfig};
use nsgp::fit::ModelConfig;
use nsgp::kernels::KernelSpec;
use serde::Deserialize;

use crate::error::CliError;

fn default_quantiles() -> Vec<f64> {
    vec![0.05, 0.5, 0.95]
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; `--seed` takes precedence.
    pub seed: Option<u64>,
    /// Input CSV. Relative paths resolve against the config file's directory.
    pub data: Option<PathBuf>,
    #[serde(default)]
    pub columns: ColumnMap,
    pub split: Option<SplitSpec>,
    pub model: Option<ModelConfig>,
    /// Fit file read by `predict` and `evaluate`.
    pub fit: Option<PathBuf>,
    #[serde(default = "default_quantiles")]
    pub quantiles: Vec<f64>,
    pub regimes: Option<RegimeConfig>,
    pub prior: Option<PriorConfig>,
    pub synth: Option<SynthSpec>,
    pub suite: Option<String>,
    pub bench: Option<BenchConfig>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: None,
            data: None,
            columns: ColumnMap::default(),
            split: None,
            model: None,
            fit: None,
            quantiles: default_quantiles(),
            regimes: None,
            prior: None,
            synth: None,
            suite: None,
            bench: None,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegimeConfig {
    pub k: usize,
}

/// Regular grid over a box, `points` per axis.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub points: usize,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorConfig {
    pub kernel: KernelSpec,
    pub count: usize,
    /// Sampling inputs; the `data` inputs are used when absent.
    pub grid: Option<GridSpec>,
    #[serde(default = "one")]
    pub field_lengthscale: f64,
    #[serde(default = "one")]
    pub field_variance: f64,
    /// Prior mean of the log-lengthscale field; log median pairwise distance when absent.
    pub field_mean: Option<f64>,
    /// Diagonal jitter Ω of matrix fields; 0.1 per dimension when absent.
    pub omega: Option<Vec<f64>>,
}

#[derive(Debug, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum SynthSpec {
    Nonstationary(SynthConfig),
    Spatiotemporal(GridConfig),
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let de = &mut serde_json::Deserializer::from_str(&text);
        let mut config: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            CliError::Config(format!("config {} at `{}`: {}", path.display(), e.path(), e.inner()))
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut config.data, &mut config.fit].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(config)
    }

    pub fn data_path(&self) -> Result<&Path, CliError> {
        let p = self
            .data
            .as_deref()
            .ok_or_else(|| CliError::Config("config needs a `data` path".into()))?;
        if !p.exists() {
            return Err(CliError::Config(format!("data file {} does not exist", p.display())));
        }
        Ok(p)
    }

    pub fn fit_path(&self) -> Result<&Path, CliError> {
        let p = self
            .fit
            .as_deref()
            .ok_or_else(|| CliError::Config("config needs a `fit` path".into()))?;
        if !p.exists() {
            return Err(CliError::Config(format!("fit file {} does not exist", p.display())));
        }
        Ok(p)
    }
}
