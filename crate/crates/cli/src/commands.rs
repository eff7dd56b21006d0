use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use nsgp::bench::{run_bench_on, suite_data, synth_spatiotemporal, BenchData, BenchTable, GridConfig, Suite};
use nsgp::data::{
    fingerprint, kmeans_regimes, load_csv, load_inputs_csv, split, synth_nonstationary, Dataset, Fingerprint,
    SplitLabel, SplitSpec, SynthConfig,
};
use nsgp::fit::{fit_model, Evaluation, FitResult};
use nsgp::kernels::LatentKind;
use nsgp::latent::{sample_prior_functions, FieldPrior, PriorLatent};
use nsgp::optim::TrainTrace;
use nsgp::Points;
use serde::Serialize;

use crate::config::{GridSpec, RunConfig, SynthSpec};
use crate::error::{CliError, Stage};

fn fmt(v: f64) -> String {
    format!("{v}")
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>, CliError> {
    Ok(csv::Writer::from_writer(fs::File::create(path)?))
}

fn train_rows(ds: Dataset, spec: Option<&SplitSpec>, label: SplitLabel) -> Result<Dataset, CliError> {
    match spec {
        None => Ok(ds),
        Some(spec) => {
            let s = split(&ds, spec).stage("split")?;
            let idx = s.indices(label).stage("split")?;
            Ok(s.subset(&idx))
        }
    }
}

fn write_trace(path: &Path, trace: &TrainTrace) -> Result<(), CliError> {
    let mut w = csv_writer(path)?;
    w.write_record(["iteration", "objective", "best_objective", "grad_norm"])?;
    let mut best = f64::NEG_INFINITY;
    for (i, (obj, g)) in trace.objective_per_iter.iter().zip(&trace.grad_norm_per_iter).enumerate() {
        best = best.max(*obj);
        w.write_record([i.to_string(), fmt(*obj), fmt(best), fmt(*g)])?;
    }
    w.flush()?;
    Ok(())
}

pub struct FitOutcome {
    pub fit: FitResult,
    pub rows: usize,
}

pub fn fit(cfg: &RunConfig, seed: u64, out: &Path) -> Result<FitOutcome, CliError> {
    let model = cfg
        .model
        .as_ref()
        .ok_or_else(|| CliError::Config("fit needs a `model` section".into()))?;
    let ds = load_csv(cfg.data_path()?, &cfg.columns).stage("load")?;
    let train = train_rows(ds, cfg.split.as_ref(), SplitLabel::Train)?;
    let fit = fit_model(model, &train.inputs, &train.targets, seed).stage("fit")?;
    write_json(&out.join("fit.json"), &fit)?;
    write_trace(&out.join("trace.csv"), &fit.trace)?;
    Ok(FitOutcome {
        fit,
        rows: train.len(),
    })
}

pub fn read_fit(path: &Path) -> Result<FitResult, CliError> {
    let text = fs::read_to_string(path)?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(de)
        .map_err(|e| CliError::Config(format!("fit file {} at `{}`: {}", path.display(), e.path(), e.inner())))
}

/// Columns of `x` whose mean lies more than three training standard
/// deviations from the training mean.
fn shifted_columns(fit: &FitResult, x: &Points, names: &[String]) -> Vec<String> {
    let n = x.len() as f64;
    let mut out = Vec::new();
    for (d, name) in names.iter().enumerate() {
        let mean = x.rows().map(|r| r[d]).sum::<f64>() / n;
        let z = (mean - fit.normalization.input_shift[d]) / fit.normalization.input_scale[d];
        if z.abs() > 3.0 {
            out.push(format!("{name} (mean {z:.1} training sd from the training mean)"));
        }
    }
    out
}

pub fn predict(cfg: &RunConfig, out: &Path) -> Result<usize, CliError> {
    let fit = read_fit(cfg.fit_path()?)?;
    let (x, _) = load_inputs_csv(cfg.data_path()?, &cfg.columns).stage("load")?;
    let dim = fit.normalization.input_shift.len();
    if x.dim() != dim {
        return Err(CliError::Config(format!(
            "fit expects {dim} input columns, config maps {}",
            x.dim()
        )));
    }
    let mut header: Vec<String> = cfg.columns.inputs.clone();
    header.extend(["mean", "variance", "point"].map(String::from));
    header.extend(cfg.quantiles.iter().map(|q| format!("q{q}")));
    let mut w = csv_writer(&out.join("predictions.csv"))?;
    w.write_record(&header)?;
    if !x.is_empty() {
        for col in shifted_columns(&fit, &x, &cfg.columns.inputs) {
            eprintln!("warning: fingerprint mismatch: column {col}");
        }
        let pred = fit.predict(&x).stage("predict")?;
        let point = pred.point_forecast();
        let quantiles = cfg
            .quantiles
            .iter()
            .map(|&q| pred.quantile(q))
            .collect::<nsgp::Result<Vec<_>>>()
            .stage("predict")?;
        for (i, row) in x.rows().enumerate() {
            let mut rec: Vec<String> = row.iter().map(|v| fmt(*v)).collect();
            rec.extend([fmt(pred.mean[i]), fmt(pred.variance[i]), fmt(point[i])]);
            rec.extend(quantiles.iter().map(|q| fmt(q[i])));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(x.len())
}

#[derive(Serialize)]
pub struct EvaluateReport {
    pub seed: u64,
    pub split: Option<SplitSpec>,
    pub regimes: Option<usize>,
    pub fit_fingerprint: Fingerprint,
    pub data_fingerprint: Fingerprint,
    #[serde(flatten)]
    pub metrics: Evaluation,
}

pub fn evaluate(cfg: &RunConfig, seed: u64, out: &Path) -> Result<EvaluateReport, CliError> {
    let fit = read_fit(cfg.fit_path()?)?;
    let mut ds = load_csv(cfg.data_path()?, &cfg.columns).stage("load")?;
    if let Some(r) = &cfg.regimes {
        ds = kmeans_regimes(&ds, r.k, seed).stage("regimes")?.0;
    }
    let test = train_rows(ds, cfg.split.as_ref(), SplitLabel::Test)?;
    let metrics = fit
        .evaluate(&test.inputs, &test.targets, test.regimes.as_deref())
        .stage("evaluate")?;
    let report = EvaluateReport {
        seed,
        split: cfg.split.clone(),
        regimes: cfg.regimes.as_ref().map(|r| r.k),
        fit_fingerprint: fit.fingerprint.clone(),
        data_fingerprint: fingerprint(&test.inputs, &test.targets),
        metrics,
    };
    write_json(&out.join("metrics.json"), &report)?;
    Ok(report)
}

fn grid_points(g: &GridSpec) -> Result<Points, CliError> {
    let d = g.lower.len();
    if d == 0 || d != g.upper.len() || g.points == 0 {
        return Err(CliError::Config(
            "prior.grid needs matching non-empty lower/upper bounds and points >= 1".into(),
        ));
    }
    let axis = |k: usize, i: usize| {
        if g.points == 1 {
            g.lower[k]
        } else {
            g.lower[k] + (g.upper[k] - g.lower[k]) * i as f64 / (g.points - 1) as f64
        }
    };
    let total = g.points.pow(d as u32);
    let mut data = Vec::with_capacity(total * d);
    for flat in 0..total {
        let mut rest = flat;
        let mut row = vec![0.0; d];
        for k in (0..d).rev() {
            row[k] = axis(k, rest % g.points);
            rest /= g.points;
        }
        data.extend(row);
    }
    Points::new(total, d, data).stage("grid")
}

pub fn sample_prior(cfg: &RunConfig, seed: u64, out: &Path) -> Result<usize, CliError> {
    let prior = cfg
        .prior
        .as_ref()
        .ok_or_else(|| CliError::Config("sample-prior needs a `prior` section".into()))?;
    let (x, names) = match &prior.grid {
        Some(g) => {
            let x = grid_points(g)?;
            let names = (0..x.dim()).map(|d| format!("x{d}")).collect::<Vec<_>>();
            (x, names)
        }
        None => {
            let (x, _) = load_inputs_csv(cfg.data_path()?, &cfg.columns).stage("load")?;
            (x, cfg.columns.inputs.clone())
        }
    };
    let kernel = prior.kernel.clone().with_default_dims();
    kernel.validate(x.dim()).stage("kernel")?;
    let latent = match kernel.latent_requirement().stage("kernel")? {
        None => PriorLatent::None,
        Some((kind, p)) => {
            let dims = kernel.gibbs_dims().expect("Gibbs node").to_vec();
            let mean = match (kind, prior.field_mean) {
                (_, Some(m)) => m,
                (LatentKind::LogLengthscale, None) => {
                    x.columns(&dims).stage("prior")?.median_pairwise_distance().max(1e-12).ln()
                }
                (LatentKind::Covariance, None) => 0.0,
            };
            let field = FieldPrior {
                field_dims: dims.clone(),
                lengthscales: vec![prior.field_lengthscale; dims.len()],
                variance: prior.field_variance,
                mean,
                column_covariance: DMatrix::identity(p, p),
            };
            match kind {
                LatentKind::LogLengthscale => PriorLatent::Lengthscale(field),
                LatentKind::Covariance => PriorLatent::Matrix {
                    prior: field,
                    omega: prior.omega.clone().unwrap_or_else(|| vec![0.1; p]),
                },
            }
        }
    };
    let draws = sample_prior_functions(&kernel, &latent, &x, prior.count, seed).stage("sample-prior")?;
    let summary_names: Vec<String> = match &latent {
        PriorLatent::None => Vec::new(),
        PriorLatent::Lengthscale(f) => f.field_dims.iter().map(|d| format!("ell_{d}")).collect(),
        PriorLatent::Matrix { prior, .. } => prior.field_dims.iter().map(|d| format!("sigma_{d}{d}")).collect(),
    };
    let mut header = names;
    header.extend(["draw_id".to_string(), "f".to_string()]);
    header.extend(summary_names);
    let mut w = csv_writer(&out.join("prior_draws.csv"))?;
    w.write_record(&header)?;
    for (id, draw) in draws.iter().enumerate() {
        for (i, row) in x.rows().enumerate() {
            let mut rec: Vec<String> = row.iter().map(|v| fmt(*v)).collect();
            rec.push(id.to_string());
            rec.push(fmt(draw.f[i]));
            if let Some(s) = &draw.summary {
                rec.extend(s.row(i).iter().map(|v| fmt(*v)));
            }
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(draws.len())
}

pub fn synth(cfg: &RunConfig, seed: u64, out: &Path) -> Result<usize, CliError> {
    let fallback = SynthSpec::Nonstationary(SynthConfig::default());
    let spec = cfg.synth.as_ref().unwrap_or(&fallback);
    let (ds, truth) = match spec {
        SynthSpec::Nonstationary(c) => {
            let c = SynthConfig { seed, ..c.clone() };
            let s = synth_nonstationary(&c).stage("synth")?;
            (s.dataset, s.true_lengthscale)
        }
        SynthSpec::Spatiotemporal(g) => {
            let g = GridConfig { seed, ..g.clone() };
            synth_spatiotemporal(&g).stage("synth")?
        }
    };
    let mut header = ds.columns.inputs.clone();
    header.push(ds.columns.target.clone());
    header.push("true_lengthscale".into());
    let mut w = csv_writer(&out.join("synth.csv"))?;
    w.write_record(&header)?;
    for (i, row) in ds.inputs.rows().enumerate() {
        let mut rec: Vec<String> = row.iter().map(|v| fmt(*v)).collect();
        rec.push(fmt(ds.targets[i]));
        rec.push(fmt(truth[i]));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(ds.len())
}

pub fn bench(cfg: &RunConfig, suite: Option<&str>, seed: u64, out: &Path) -> Result<BenchTable, CliError> {
    let name = suite
        .or(cfg.suite.as_deref())
        .ok_or_else(|| CliError::Config("bench needs a suite (--suite or config `suite`)".into()))?;
    let suite: Suite = name.parse().stage("bench")?;
    let config = cfg.bench.clone().unwrap_or_default();
    let data = match &cfg.data {
        Some(_) => BenchData {
            dataset: load_csv(cfg.data_path()?, &cfg.columns).stage("load")?,
            true_lengthscale: None,
        },
        None => suite_data(suite, &config).stage("synth")?,
    };
    let table = run_bench_on(suite, &config, &data, seed, false).stage("bench")?;
    write_json(&out.join("bench.json"), &table)?;
    Ok(table)
}

/// Plain-text rendering of a bench table, mean ± stderr per cell.
pub fn render_table(table: &BenchTable, w: &mut impl Write) -> std::io::Result<()> {
    writeln!(
        w,
        "suite {:?}: {} splits, train fraction {}",
        table.suite, table.splits, table.train_fraction
    )?;
    writeln!(w, "{:<12} {:>22} {:>22}", "model", "RMSE", "NLPD")?;
    for row in &table.rows {
        writeln!(
            w,
            "{:<12} {:>12.4} ± {:<7.4} {:>12.4} ± {:<7.4}",
            row.model, row.rmse.mean, row.rmse.stderr, row.nlpd.mean, row.nlpd.stderr
        )?;
    }
    Ok(())
}
