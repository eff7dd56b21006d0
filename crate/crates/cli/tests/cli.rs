use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn sample() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("data/sample20.csv")
}

fn nsgp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nsgp")).args(args).output().unwrap()
}

fn write_config(dir: &Path, name: &str, value: &Value) -> String {
    let p = dir.join(name);
    fs::write(&p, serde_json::to_string_pretty(value).unwrap()).unwrap();
    p.to_string_lossy().into_owned()
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "status {:?}\nstdout {}\nstderr {}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn se_config(data: &Path) -> Value {
    json!({
        "data": data,
        "model": {
            "kernel": {"type": "se_ard", "signal_variance": 1.0, "lengthscales": [1.0, 1.0, 1.0], "active_dims": [0, 1, 2]}
        }
    })
}

fn read_csv_rows(path: &Path) -> (Vec<String>, Vec<Vec<f64>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r
        .records()
        .map(|rec| rec.unwrap().iter().map(|v| v.parse().unwrap()).collect())
        .collect();
    (header, rows)
}

fn col(header: &[String], name: &str) -> usize {
    header.iter().position(|h| h == name).unwrap()
}

#[test]
fn fit_on_bundled_sample() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "fit.json", &se_config(&sample()));
    let out = dir.path().join("run");
    let o = nsgp(&["fit", "--config", &cfg, "--seed", "1", "--out", out.to_str().unwrap()]);
    ok(&o);
    for f in ["fit.json", "trace.csv", "run_meta.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let meta: Value = serde_json::from_str(&fs::read_to_string(out.join("run_meta.json")).unwrap()).unwrap();
    assert_eq!(meta["command"], "fit");
    assert!(meta["started_unix_seconds"].is_u64());
    let fit: Value = serde_json::from_str(&fs::read_to_string(out.join("fit.json")).unwrap()).unwrap();
    assert!(fit["trace"].get("wall_time").is_none());
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let mut bad = se_config(&sample());
    bad["model"]["kernel"]["lengthscales"] = json!("long");
    let cfg = write_config(dir.path(), "bad.json", &bad);
    let o = nsgp(&["fit", "--config", &cfg, "--seed", "1", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("model.kernel"), "{err}");

    let cfg = write_config(dir.path(), "ok.json", &se_config(&sample()));
    let o = nsgp(&["fit", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "seed is mandatory");

    let mut missing = se_config(&sample());
    missing["data"] = json!("does-not-exist.csv");
    let cfg = write_config(dir.path(), "missing.json", &missing);
    let o = nsgp(&["fit", "--config", &cfg, "--seed", "1", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));

    let o = nsgp(&["bench", "--suite", "nope", "--seed", "1", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn numerical_failure_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = se_config(&sample());
    // a signal variance at the edge of f64 overflows the Cholesky factor
    cfg["model"]["kernel"]["signal_variance"] = json!(1e308);
    let path = write_config(dir.path(), "num.json", &cfg);
    let o = nsgp(&["fit", "--config", &path, "--seed", "1", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("during fit"));
}

#[test]
fn fit_and_bench_are_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "fit.json", &se_config(&sample()));
    let bench_cfg = write_config(
        dir.path(),
        "bench.json",
        &json!({
            "suite": "temporal",
            "bench": {"splits": 2, "synth": {"n_points": 30}, "optimizer": {"algorithm": "lbfgs", "max_iters": 15}}
        }),
    );
    let mut outputs = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        let o = out.to_str().unwrap();
        ok(&nsgp(&["fit", "--config", &cfg, "--seed", "7", "--out", o]));
        ok(&nsgp(&["bench", "--config", &bench_cfg, "--seed", "7", "--out", o]));
        outputs.push(out);
    }
    for f in ["fit.json", "trace.csv", "bench.json"] {
        let a = fs::read(outputs[0].join(f)).unwrap();
        let b = fs::read(outputs[1].join(f)).unwrap();
        assert_eq!(a, b, "{f} differs");
    }
}

#[test]
fn predict_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let mut cfg = se_config(&sample());
    cfg["model"]["noise_variance"] = json!(1e-4);
    let fit_cfg = write_config(dir.path(), "fit.json", &cfg);
    ok(&nsgp(&["fit", "--config", &fit_cfg, "--seed", "3", "--out", run.to_str().unwrap()]));

    let pred_cfg = write_config(
        dir.path(),
        "predict.json",
        &json!({"data": sample(), "fit": run.join("fit.json"), "quantiles": [0.1, 0.5, 0.9]}),
    );
    let out = dir.path().join("pred");
    ok(&nsgp(&["predict", "--config", &pred_cfg, "--seed", "3", "--out", out.to_str().unwrap()]));
    let (header, rows) = read_csv_rows(&out.join("predictions.csv"));
    assert_eq!(rows.len(), 20);
    let (_, data) = read_csv_rows(&sample());
    let (m, q1, q9) = (col(&header, "mean"), col(&header, "q0.1"), col(&header, "q0.9"));
    for (r, d) in rows.iter().zip(&data) {
        assert!((r[m] - d[3]).abs() < 0.05, "{} vs {}", r[m], d[3]);
        assert!(r[q1] < r[m] && r[m] < r[q9]);
    }

    let empty = dir.path().join("empty.csv");
    fs::write(&empty, "lat,lon,time\n").unwrap();
    let cfg = write_config(dir.path(), "empty.json", &json!({"data": empty, "fit": run.join("fit.json")}));
    let out = dir.path().join("empty_out");
    ok(&nsgp(&["predict", "--config", &cfg, "--seed", "3", "--out", out.to_str().unwrap()]));
    let text = fs::read_to_string(out.join("predictions.csv")).unwrap();
    assert_eq!(text, "lat,lon,time,mean,variance,point,q0.05,q0.5,q0.95\n");
}

#[test]
fn lognormal_quantiles_are_positive() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let mut cfg = se_config(&sample());
    cfg["model"]["transform"] = json!("log");
    let fit_cfg = write_config(dir.path(), "fit.json", &cfg);
    ok(&nsgp(&["fit", "--config", &fit_cfg, "--seed", "3", "--out", run.to_str().unwrap()]));
    let far = dir.path().join("far.csv");
    fs::write(&far, "lat,lon,time\n34,72,0\n80,-20,40\n").unwrap();
    let cfg = write_config(
        dir.path(),
        "p.json",
        &json!({"data": far, "fit": run.join("fit.json"), "quantiles": [0.001, 0.5, 0.999]}),
    );
    let o = nsgp(&["predict", "--config", &cfg, "--seed", "3", "--out", run.to_str().unwrap()]);
    ok(&o);
    assert!(String::from_utf8_lossy(&o.stderr).contains("fingerprint mismatch"));
    let (header, rows) = read_csv_rows(&run.join("predictions.csv"));
    for r in &rows {
        for q in ["q0.001", "q0.5", "q0.999", "point"] {
            assert!(r[col(&header, q)] > 0.0);
        }
    }
}

#[test]
fn evaluate_matches_library_and_regimes_average() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let fit_cfg = write_config(dir.path(), "fit.json", &se_config(&sample()));
    ok(&nsgp(&["fit", "--config", &fit_cfg, "--seed", "5", "--out", run.to_str().unwrap()]));
    let cfg = write_config(
        dir.path(),
        "eval.json",
        &json!({"data": sample(), "fit": run.join("fit.json"), "regimes": {"k": 2}}),
    );
    ok(&nsgp(&["evaluate", "--config", &cfg, "--seed", "5", "--out", run.to_str().unwrap()]));
    let m: Value = serde_json::from_str(&fs::read_to_string(run.join("metrics.json")).unwrap()).unwrap();

    let fit: nsgp::fit::FitResult = serde_json::from_str(&fs::read_to_string(run.join("fit.json")).unwrap()).unwrap();
    let ds = nsgp::data::load_csv(&sample(), &nsgp::data::ColumnMap::default()).unwrap();
    let direct = fit.evaluate(&ds.inputs, &ds.targets, None).unwrap();
    assert_eq!(m["rmse"].as_f64().unwrap(), direct.overall.rmse);
    assert_eq!(m["nlpd"].as_f64().unwrap(), direct.overall.nlpd);

    let per = m["per_regime"].as_array().unwrap();
    assert_eq!(per.len(), 2);
    let n = m["n"].as_f64().unwrap();
    let weighted: f64 = per
        .iter()
        .map(|r| r["nlpd"].as_f64().unwrap() * r["n"].as_f64().unwrap() / n)
        .sum();
    assert!((weighted - direct.overall.nlpd).abs() < 1e-10);
    let mse: f64 = per
        .iter()
        .map(|r| r["rmse"].as_f64().unwrap().powi(2) * r["n"].as_f64().unwrap() / n)
        .sum();
    assert!((mse.sqrt() - direct.overall.rmse).abs() < 1e-10);

    let perfect = dir.path().join("perfect");
    let cfg = write_config(
        dir.path(),
        "split.json",
        &json!({"data": sample(), "fit": run.join("fit.json"), "split": {"strategy": "temporal", "cutoff": 100.0}}),
    );
    let o = nsgp(&["evaluate", "--config", &cfg, "--seed", "5", "--out", perfect.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "empty test side is a degenerate split");
}

#[test]
fn sample_prior_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let prior = |count: usize, kernel: Value| {
        json!({"prior": {"kernel": kernel, "count": count, "grid": {"lower": [0.0], "upper": [1.0], "points": 5}}})
    };
    let se = json!({"type": "se_ard", "signal_variance": 2.0, "lengthscales": [0.3], "active_dims": [0]});
    let cfg = write_config(dir.path(), "se.json", &prior(4000, se.clone()));
    let a = dir.path().join("a");
    ok(&nsgp(&["sample-prior", "--config", &cfg, "--seed", "4", "--out", a.to_str().unwrap()]));
    let (header, rows) = read_csv_rows(&a.join("prior_draws.csv"));
    assert_eq!(header, ["x0", "draw_id", "f"]);
    assert_eq!(rows.len(), 20000);
    for point in 0..5 {
        let vals: Vec<f64> = rows.iter().skip(point).step_by(5).map(|r| r[2]).collect();
        let var = vals.iter().map(|v| v * v).sum::<f64>() / vals.len() as f64;
        assert!((var - 2.0).abs() < 0.2, "point {point}: {var}");
    }
    let b = dir.path().join("b");
    ok(&nsgp(&["sample-prior", "--config", &cfg, "--seed", "4", "--out", b.to_str().unwrap()]));
    assert_eq!(
        fs::read(a.join("prior_draws.csv")).unwrap(),
        fs::read(b.join("prior_draws.csv")).unwrap()
    );

    let cfg = write_config(dir.path(), "zero.json", &prior(0, se));
    ok(&nsgp(&["sample-prior", "--config", &cfg, "--seed", "4", "--out", a.to_str().unwrap()]));
    assert_eq!(fs::read_to_string(a.join("prior_draws.csv")).unwrap(), "x0,draw_id,f\n");

    let fgk = json!({"type": "fgk", "active_dims": [0]});
    let cfg = write_config(dir.path(), "fgk.json", &prior(2, fgk));
    ok(&nsgp(&["sample-prior", "--config", &cfg, "--seed", "4", "--out", a.to_str().unwrap()]));
    let (header, rows) = read_csv_rows(&a.join("prior_draws.csv"));
    assert_eq!(header, ["x0", "draw_id", "f", "ell_0"]);
    assert!(rows.iter().all(|r| r[3] > 0.0));
}

#[test]
fn synth_then_fgk_fit_trace() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "synth.json", &json!({"synth": {"nonstationary": {"n_points": 40}}}));
    let out = dir.path().join("s");
    ok(&nsgp(&["synth", "--config", &cfg, "--seed", "2", "--out", out.to_str().unwrap()]));
    let (header, rows) = read_csv_rows(&out.join("synth.csv"));
    assert_eq!(header, ["x0", "y", "true_lengthscale"]);
    assert_eq!(rows.len(), 40);

    let fit_cfg = write_config(
        dir.path(),
        "fgk.json",
        &json!({
            "data": out.join("synth.csv"),
            "columns": {"inputs": ["x0"], "target": "y"},
            "model": {"kernel": {"type": "product", "left": {"type": "constant", "variance": 1.0}, "right": {"type": "fgk", "active_dims": [0]}}}
        }),
    );
    ok(&nsgp(&["fit", "--config", &fit_cfg, "--seed", "2", "--threads", "2", "--out", out.to_str().unwrap()]));
    let (header, rows) = read_csv_rows(&out.join("trace.csv"));
    let best = col(&header, "best_objective");
    assert!(rows.windows(2).all(|w| w[1][best] >= w[0][best]));
    assert!(rows.len() > 1);
}
