//! Tabular observations: CSV ingestion, normalisation, splits, regimes and
//! synthetic non-stationary benchmarks.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DVector;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cluster::kmeans;
use crate::error::{mismatch, Error, Result};
use crate::exact::{TargetScaling, TargetTransform};
use crate::kernels::k_fgk;
use crate::linalg::cholesky_psd;
use crate::points::Points;
use crate::rng::substream;

/// Which CSV columns feed the model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ColumnMap {
    /// Input columns in model order.
    pub inputs: Vec<String>,
    pub target: String,
    /// Input column holding time in months, used by temporal splits and regimes.
    pub time: Option<String>,
    pub lat: Option<String>,
    pub lon: Option<String>,
    /// Reject negative targets (e.g. precipitation).
    pub nonnegative_target: bool,
}

impl Default for ColumnMap {
    fn default() -> Self {
        Self {
            inputs: vec!["lat".into(), "lon".into(), "time".into()],
            target: "value".into(),
            time: Some("time".into()),
            lat: Some("lat".into()),
            lon: Some("lon".into()),
            nonnegative_target: false,
        }
    }
}

impl ColumnMap {
    /// Plain numeric inputs without spatio-temporal roles.
    pub fn plain(inputs: &[&str], target: &str) -> Self {
        Self {
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
            target: target.into(),
            time: None,
            lat: None,
            lon: None,
            nonnegative_target: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitLabel {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub columns: ColumnMap,
    pub inputs: Points,
    pub targets: Vec<f64>,
    /// Rows dropped at ingestion because a mapped value was not finite.
    pub rejected_rows: usize,
    pub split: Option<Vec<SplitLabel>>,
    pub regimes: Option<Vec<usize>>,
}

impl Dataset {
    pub fn new(columns: ColumnMap, inputs: Points, targets: Vec<f64>) -> Result<Self> {
        if inputs.len() != targets.len() {
            return Err(mismatch(format!("{} input rows but {} targets", inputs.len(), targets.len())));
        }
        if inputs.dim() != columns.inputs.len() {
            return Err(mismatch(format!(
                "inputs have {} columns but the column map names {}",
                inputs.dim(),
                columns.inputs.len()
            )));
        }
        Ok(Self {
            columns,
            inputs,
            targets,
            rejected_rows: 0,
            split: None,
            regimes: None,
        })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    fn column_index(&self, name: &str) -> Result<usize> {
        self.columns
            .inputs
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::InvalidConfig(format!("'{name}' is not an input column")))
    }

    fn role_column(&self, role: &Option<String>, what: &str) -> Result<usize> {
        match role {
            Some(name) => self.column_index(name),
            None => Err(Error::InvalidConfig(format!("column map has no {what} column"))),
        }
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            columns: self.columns.clone(),
            inputs: self.inputs.select(idx),
            targets: idx.iter().map(|&i| self.targets[i]).collect(),
            rejected_rows: 0,
            split: self.split.as_ref().map(|s| idx.iter().map(|&i| s[i]).collect()),
            regimes: self.regimes.as_ref().map(|r| idx.iter().map(|&i| r[i]).collect()),
        }
    }

    /// Row indices with the given split label.
    pub fn indices(&self, label: SplitLabel) -> Result<Vec<usize>> {
        let split = self
            .split
            .as_ref()
            .ok_or_else(|| Error::InvalidConfig("dataset has no split assignment".into()))?;
        Ok((0..self.len()).filter(|&i| split[i] == label).collect())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_csv_to(file)
    }

    pub fn write_csv_to<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = self.columns.inputs.clone();
        header.push(self.columns.target.clone());
        out.write_record(&header)?;
        for i in 0..self.len() {
            let mut rec: Vec<String> = self.inputs.row(i).iter().map(|v| v.to_string()).collect();
            rec.push(self.targets[i].to_string());
            out.write_record(&rec)?;
        }
        out.flush()?;
        Ok(())
    }
}

pub fn load_csv(path: &Path, columns: &ColumnMap) -> Result<Dataset> {
    let file = std::fs::File::open(path)?;
    read_csv(file, columns)
}

struct RawRows {
    inputs: Vec<f64>,
    targets: Vec<f64>,
    rows: usize,
    rejected: usize,
}

fn read_rows<R: Read>(reader: R, columns: &ColumnMap, with_target: bool) -> Result<RawRows> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header = rdr.headers()?.clone();
    let find = |name: &str| {
        header.iter().position(|h| h == name).ok_or_else(|| Error::Parse {
            line: 1,
            message: format!("missing column '{name}'"),
        })
    };
    let input_idx = columns.inputs.iter().map(|c| find(c)).collect::<Result<Vec<_>>>()?;
    let target_idx = if with_target { Some(find(&columns.target)?) } else { None };
    let mut out = RawRows {
        inputs: Vec::new(),
        targets: Vec::new(),
        rows: 0,
        rejected: 0,
    };
    for (k, record) in rdr.records().enumerate() {
        let line = k + 2;
        let record = record.map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        let parse = |idx: usize, name: &str| -> Result<f64> {
            let raw = record.get(idx).ok_or_else(|| Error::Parse {
                line,
                message: format!("missing value for '{name}'"),
            })?;
            raw.parse::<f64>().map_err(|_| Error::Parse {
                line,
                message: format!("column '{name}': cannot parse '{raw}' as a number"),
            })
        };
        let mut row = Vec::with_capacity(input_idx.len());
        for (idx, name) in input_idx.iter().zip(&columns.inputs) {
            row.push(parse(*idx, name)?);
        }
        let t = match target_idx {
            Some(idx) => Some(parse(idx, &columns.target)?),
            None => None,
        };
        if row.iter().any(|v| !v.is_finite()) || t.is_some_and(|t| !t.is_finite()) {
            out.rejected += 1;
            continue;
        }
        if let Some(t) = t {
            if columns.nonnegative_target && t < 0.0 {
                return Err(Error::Parse {
                    line,
                    message: format!("column '{}': negative value {t}", columns.target),
                });
            }
            out.targets.push(t);
        }
        out.inputs.extend(row);
        out.rows += 1;
    }
    Ok(out)
}

/// Parses CSV with a header row. Rows with non-finite mapped values are
/// dropped and counted in `rejected_rows`.
pub fn read_csv<R: Read>(reader: R, columns: &ColumnMap) -> Result<Dataset> {
    let raw = read_rows(reader, columns, true)?;
    if raw.rows == 0 {
        return Err(Error::EmptyDataset);
    }
    let inputs = Points::new(raw.rows, columns.inputs.len(), raw.inputs)?;
    let mut ds = Dataset::new(columns.clone(), inputs, raw.targets)?;
    ds.rejected_rows = raw.rejected;
    Ok(ds)
}

/// Reads only the input columns; the target column may be absent and the
/// file may have no data rows. Returns the inputs and the rejected-row count.
pub fn read_inputs_csv<R: Read>(reader: R, columns: &ColumnMap) -> Result<(Points, usize)> {
    let raw = read_rows(reader, columns, false)?;
    Ok((Points::new(raw.rows, columns.inputs.len(), raw.inputs)?, raw.rejected))
}

pub fn load_inputs_csv(path: &Path, columns: &ColumnMap) -> Result<(Points, usize)> {
    read_inputs_csv(std::fs::File::open(path)?, columns)
}

/// Per-column affine input standardisation and target scaling, estimated on
/// training rows and recorded with every fit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub input_shift: Vec<f64>,
    pub input_scale: Vec<f64>,
    pub target: TargetScaling,
}

impl Normalization {
    pub fn fit(inputs: &Points, targets: &[f64], transform: TargetTransform) -> Result<Self> {
        if inputs.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let n = inputs.len() as f64;
        let dim = inputs.dim();
        let mut shift = vec![0.0; dim];
        let mut scale = vec![0.0; dim];
        for r in inputs.rows() {
            for d in 0..dim {
                shift[d] += r[d] / n;
            }
        }
        for r in inputs.rows() {
            for d in 0..dim {
                scale[d] += (r[d] - shift[d]).powi(2) / n;
            }
        }
        for s in scale.iter_mut() {
            *s = if s.sqrt() > 1e-12 { s.sqrt() } else { 1.0 };
        }
        Ok(Self {
            input_shift: shift,
            input_scale: scale,
            target: TargetScaling::fit(transform, targets)?,
        })
    }

    /// No-op normalisation.
    pub fn identity(dim: usize) -> Self {
        Self {
            input_shift: vec![0.0; dim],
            input_scale: vec![1.0; dim],
            target: TargetScaling::default(),
        }
    }

    pub fn inputs(&self, x: &Points) -> Result<Points> {
        self.check_dim(x)?;
        let mut out = x.clone();
        for r in 0..out.len() {
            for (d, v) in out.row_mut(r).iter_mut().enumerate() {
                *v = (*v - self.input_shift[d]) / self.input_scale[d];
            }
        }
        Ok(out)
    }

    pub fn inputs_inverse(&self, x: &Points) -> Result<Points> {
        self.check_dim(x)?;
        let mut out = x.clone();
        for r in 0..out.len() {
            for (d, v) in out.row_mut(r).iter_mut().enumerate() {
                *v = *v * self.input_scale[d] + self.input_shift[d];
            }
        }
        Ok(out)
    }

    pub fn targets(&self, y: &[f64]) -> Result<Vec<f64>> {
        self.target.forward(y)
    }

    pub fn targets_inverse(&self, t: &[f64]) -> Vec<f64> {
        t.iter()
            .map(|&v| {
                let g = self.target.to_gaussian(v);
                match self.target.transform {
                    TargetTransform::None => g,
                    TargetTransform::Log => g.exp(),
                }
            })
            .collect()
    }

    fn check_dim(&self, x: &Points) -> Result<()> {
        if x.dim() != self.input_shift.len() {
            return Err(mismatch(format!(
                "normalisation has {} input columns, data {}",
                self.input_shift.len(),
                x.dim()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "strategy", rename_all = "snake_case", deny_unknown_fields)]
pub enum SplitSpec {
    /// Each row goes to training with probability `fraction`.
    Random { fraction: f64, seed: u64 },
    /// Rows with time strictly before `cutoff` train.
    Temporal { cutoff: f64 },
}

/// Assigns train/test labels. Deterministic for a given spec.
pub fn split(dataset: &Dataset, spec: &SplitSpec) -> Result<Dataset> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let labels: Vec<SplitLabel> = match spec {
        SplitSpec::Random { fraction, seed } => {
            if !(*fraction > 0.0 && *fraction < 1.0) {
                return Err(Error::InvalidConfig(format!("split fraction must lie in (0, 1), got {fraction}")));
            }
            let mut rng = substream(*seed, "split");
            (0..dataset.len())
                .map(|_| {
                    if rng.gen::<f64>() < *fraction {
                        SplitLabel::Train
                    } else {
                        SplitLabel::Test
                    }
                })
                .collect()
        }
        SplitSpec::Temporal { cutoff } => {
            let t = dataset.role_column(&dataset.columns.time, "time")?;
            dataset
                .inputs
                .rows()
                .map(|r| if r[t] < *cutoff { SplitLabel::Train } else { SplitLabel::Test })
                .collect()
        }
    };
    let n_train = labels.iter().filter(|l| **l == SplitLabel::Train).count();
    if n_train == 0 || n_train == labels.len() {
        return Err(Error::DegenerateSplit(format!(
            "{n_train} training rows and {} test rows",
            labels.len() - n_train
        )));
    }
    let mut out = dataset.clone();
    out.split = Some(labels);
    Ok(out)
}

/// Cluster labels per spatial cell plus the row-level labels.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Regimes {
    /// `(lat, lon)` of each cell, sorted.
    pub cells: Vec<(f64, f64)>,
    pub cell_labels: Vec<usize>,
    /// Mean seasonal cycle (12 values) per cell.
    pub climatology: Vec<Vec<f64>>,
    pub objective_trace: Vec<f64>,
}

/// Groups spatial cells by their 12-month climatology with k-means.
/// Months with no observations fall back to the cell's overall mean.
pub fn kmeans_regimes(dataset: &Dataset, k: usize, seed: u64) -> Result<(Dataset, Regimes)> {
    let lat = dataset.role_column(&dataset.columns.lat, "latitude")?;
    let lon = dataset.role_column(&dataset.columns.lon, "longitude")?;
    let time = dataset.role_column(&dataset.columns.time, "time")?;
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let key = |r: &[f64]| (r[lat].to_bits(), r[lon].to_bits());
    let mut sums: BTreeMap<(u64, u64), ([f64; 12], [usize; 12])> = BTreeMap::new();
    for (i, r) in dataset.inputs.rows().enumerate() {
        let month = (r[time].floor() as i64).rem_euclid(12) as usize;
        let e = sums.entry(key(r)).or_insert(([0.0; 12], [0; 12]));
        e.0[month] += dataset.targets[i];
        e.1[month] += 1;
    }
    let mut cells: Vec<((u64, u64), Vec<f64>)> = sums
        .into_iter()
        .map(|(k, (s, c))| {
            let total: f64 = s.iter().sum();
            let count: usize = c.iter().sum();
            let overall = total / count as f64;
            let clim = (0..12)
                .map(|m| if c[m] > 0 { s[m] / c[m] as f64 } else { overall })
                .collect();
            (k, clim)
        })
        .collect();
    cells.sort_by(|a, b| {
        let (la, oa) = (f64::from_bits(a.0 .0), f64::from_bits(a.0 .1));
        let (lb, ob) = (f64::from_bits(b.0 .0), f64::from_bits(b.0 .1));
        la.total_cmp(&lb).then(oa.total_cmp(&ob))
    });
    if k > cells.len() {
        return Err(Error::KTooLarge { k, cells: cells.len() });
    }
    let features = Points::from_rows(&cells.iter().map(|c| c.1.clone()).collect::<Vec<_>>())?;
    let km = kmeans(&features, k, seed)?;
    let index: BTreeMap<(u64, u64), usize> = cells.iter().enumerate().map(|(i, c)| (c.0, i)).collect();
    let row_labels = dataset.inputs.rows().map(|r| km.labels[index[&key(r)]]).collect();
    let mut out = dataset.clone();
    out.regimes = Some(row_labels);
    Ok((
        out,
        Regimes {
            cells: cells.iter().map(|c| (f64::from_bits(c.0 .0), f64::from_bits(c.0 .1))).collect(),
            cell_labels: km.labels,
            climatology: cells.into_iter().map(|c| c.1).collect(),
            objective_trace: km.objective_trace,
        },
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LengthscaleProfile {
    /// Short lengthscale for `x₀ < ½`, long otherwise.
    Piecewise,
    /// Logistic transition between the two lengthscales around `x₀ = ½`.
    Smooth,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_points: usize,
    pub dims: usize,
    pub lengthscale_profile: LengthscaleProfile,
    pub short_lengthscale: f64,
    pub long_lengthscale: f64,
    pub signal_variance: f64,
    /// Observation noise variance.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_points: 200,
            dims: 1,
            lengthscale_profile: LengthscaleProfile::Piecewise,
            short_lengthscale: 0.05,
            long_lengthscale: 0.5,
            signal_variance: 1.0,
            noise: 0.01,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn lengthscale_at(&self, x: &[f64]) -> f64 {
        let (s, l) = (self.short_lengthscale, self.long_lengthscale);
        match self.lengthscale_profile {
            LengthscaleProfile::Piecewise => {
                if x[0] < 0.5 {
                    s
                } else {
                    l
                }
            }
            LengthscaleProfile::Smooth => {
                let w = 1.0 / (1.0 + (-(x[0] - 0.5) / 0.05).exp());
                (s.ln() * (1.0 - w) + l.ln() * w).exp()
            }
        }
    }
}

/// Synthetic data plus the generating lengthscale at each input.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthData {
    pub dataset: Dataset,
    pub true_lengthscale: Vec<f64>,
}

/// Draws `f ~ GP(0, σ² k_FGK)` with the given per-input isotropic
/// lengthscales and adds `N(0, noise)`. Repeated inputs share one function
/// value.
pub fn sample_fgk_function<R: Rng>(
    x: &Points,
    lengthscales: &[f64],
    signal_variance: f64,
    noise: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if lengthscales.len() != x.len() {
        return Err(mismatch("one lengthscale per input required"));
    }
    let mut unique: Vec<usize> = Vec::new();
    let mut owner = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        match unique.iter().position(|&u| x.row(u) == x.row(i)) {
            Some(k) => owner.push(k),
            None => {
                owner.push(unique.len());
                unique.push(i);
            }
        }
    }
    let dim = x.dim();
    let m = unique.len();
    let ls: Vec<Vec<f64>> = unique.iter().map(|&i| vec![lengthscales[i]; dim]).collect();
    let mut k = nalgebra::DMatrix::zeros(m, m);
    for a in 0..m {
        for b in 0..=a {
            let v = signal_variance * k_fgk(x.row(unique[a]), x.row(unique[b]), &ls[a], &ls[b])?;
            k[(a, b)] = v;
            k[(b, a)] = v;
        }
    }
    let factor = cholesky_psd(&k, 1e-8)?;
    let z = DVector::from_fn(m, |_, _| rng.sample::<f64, _>(StandardNormal));
    let f = factor.lower() * z;
    Ok(owner
        .iter()
        .map(|&o| f[o] + noise.sqrt() * rng.sample::<f64, _>(StandardNormal))
        .collect())
}

/// Non-stationary benchmark on the unit cube with a known lengthscale field.
pub fn synth_nonstationary(config: &SynthConfig) -> Result<SynthData> {
    if config.n_points < 10 {
        return Err(Error::InvalidConfig(format!("need at least 10 points, got {}", config.n_points)));
    }
    if !(1..=2).contains(&config.dims) {
        return Err(Error::InvalidConfig(format!("synthetic inputs must be 1- or 2-D, got {}", config.dims)));
    }
    for (name, v) in [
        ("short_lengthscale", config.short_lengthscale),
        ("long_lengthscale", config.long_lengthscale),
        ("signal_variance", config.signal_variance),
    ] {
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::InvalidConfig(format!("{name} must be positive, got {v}")));
        }
    }
    if !(config.noise >= 0.0) {
        return Err(Error::InvalidConfig(format!("noise must be non-negative, got {}", config.noise)));
    }
    let mut rng = substream(config.seed, "synth");
    let n = config.n_points;
    let x = Points::new(n, config.dims, (0..n * config.dims).map(|_| rng.gen::<f64>()).collect())?;
    let true_lengthscale: Vec<f64> = x.rows().map(|r| config.lengthscale_at(r)).collect();
    let y = sample_fgk_function(&x, &true_lengthscale, config.signal_variance, config.noise, &mut rng)?;
    let names: Vec<String> = (0..config.dims).map(|d| format!("x{d}")).collect();
    let columns = ColumnMap {
        inputs: names,
        target: "y".into(),
        time: None,
        lat: None,
        lon: None,
        nonnegative_target: false,
    };
    Ok(SynthData {
        dataset: Dataset::new(columns, x, y)?,
        true_lengthscale,
    })
}

/// Row count and SHA-256 over inputs and targets.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fingerprint {
    pub rows: usize,
    pub sha256: String,
}

pub fn fingerprint(inputs: &Points, targets: &[f64]) -> Fingerprint {
    let mut h = Sha256::new();
    h.update((inputs.len() as u64).to_le_bytes());
    h.update((inputs.dim() as u64).to_le_bytes());
    for v in inputs.as_slice().iter().chain(targets) {
        h.update(v.to_le_bytes());
    }
    let digest = h.finalize();
    Fingerprint {
        rows: targets.len(),
        sha256: digest.iter().map(|b| format!("{b:02x}")).collect(),
    }
}
