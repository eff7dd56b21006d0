//! First-order and quasi-Newton minimisation with gradient checking.
//!
//! Every model objective is expressed as a function to *minimise* (negative
//! log posterior, negative ELBO) over an unconstrained parameter vector.

use std::collections::VecDeque;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A differentiable scalar function of an unconstrained parameter vector.
pub trait Objective {
    fn dim(&self) -> usize;

    /// Value and gradient at `params`.
    fn value_grad(&self, params: &[f64]) -> Result<(f64, Vec<f64>)>;

    fn value(&self, params: &[f64]) -> Result<f64> {
        Ok(self.value_grad(params)?.0)
    }

    /// Maps an iterate back onto the feasible set (e.g. box constraints).
    fn project(&self, _params: &mut [f64]) {}
}

/// Wraps a closure returning `(value, gradient)`.
pub struct FnObjective<F> {
    dim: usize,
    f: F,
}

impl<F> FnObjective<F>
where
    F: Fn(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F> Objective for FnObjective<F>
where
    F: Fn(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn value_grad(&self, params: &[f64]) -> Result<(f64, Vec<f64>)> {
        (self.f)(params)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Adam,
    Lbfgs,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub algorithm: Algorithm,
    pub step_size: f64,
    pub max_iters: usize,
    pub convergence_tol: f64,
    pub seed: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Adam,
            step_size: 0.01,
            max_iters: 2000,
            convergence_tol: 1e-6,
            seed: 0,
        }
    }
}

impl OptimConfig {
    /// Quasi-Newton defaults for small stationary problems.
    pub fn lbfgs() -> Self {
        Self {
            algorithm: Algorithm::Lbfgs,
            step_size: 1.0,
            max_iters: 500,
            convergence_tol: 1e-9,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::InvalidConfig(format!("step_size must be positive, got {}", self.step_size)));
        }
        if self.max_iters == 0 {
            return Err(Error::InvalidConfig("max_iters must be at least 1".into()));
        }
        if !(self.convergence_tol >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "convergence_tol must be non-negative, got {}",
                self.convergence_tol
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub objective_per_iter: Vec<f64>,
    pub grad_norm_per_iter: Vec<f64>,
    #[serde(skip_serializing, default)]
    pub wall_time: f64,
}

impl TrainTrace {
    pub fn len(&self) -> usize {
        self.objective_per_iter.len()
    }

    pub fn is_empty(&self) -> bool {
        self.objective_per_iter.is_empty()
    }

    /// Flips the sign of the recorded objective (minimised → maximised form).
    pub fn negated(mut self) -> Self {
        self.objective_per_iter.iter_mut().for_each(|v| *v = -*v);
        self
    }
}

const WINDOW: usize = 10;
const MAX_STEP_RETRIES: usize = 8;

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Analytic gradient at `params`, rejecting non-finite entries.
pub fn gradient(objective: &dyn Objective, params: &[f64]) -> Result<Vec<f64>> {
    let (_, g) = objective.value_grad(params)?;
    check_grad(&g)?;
    Ok(g)
}

fn check_grad(g: &[f64]) -> Result<()> {
    match g.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::NonFiniteGradient(i)),
        None => Ok(()),
    }
}

/// Evaluates, turning numerical failures and non-finite values into `None`
/// so callers can shorten the step.
fn try_eval(objective: &dyn Objective, x: &[f64]) -> Result<Option<(f64, Vec<f64>)>> {
    match objective.value_grad(x) {
        Ok((v, g)) if v.is_finite() && g.iter().all(|e| e.is_finite()) => Ok(Some((v, g))),
        Ok(_) => Ok(None),
        Err(e) if e.is_numerical() => Ok(None),
        Err(e) => Err(e),
    }
}

struct Tracker {
    trace: TrainTrace,
    best_x: Vec<f64>,
    best_f: f64,
    recent: VecDeque<f64>,
    tol: f64,
}

impl Tracker {
    fn new(x: &[f64], f: f64, g: &[f64], tol: f64) -> Self {
        let mut recent = VecDeque::with_capacity(WINDOW + 1);
        recent.push_back(f);
        Self {
            trace: TrainTrace {
                objective_per_iter: vec![f],
                grad_norm_per_iter: vec![norm(g)],
                wall_time: 0.0,
            },
            best_x: x.to_vec(),
            best_f: f,
            recent,
            tol,
        }
    }

    /// Records an iterate; returns true once the windowed relative change is below tolerance.
    fn record(&mut self, x: &[f64], f: f64, g: &[f64]) -> bool {
        self.trace.objective_per_iter.push(f);
        self.trace.grad_norm_per_iter.push(norm(g));
        if f < self.best_f {
            self.best_f = f;
            self.best_x.copy_from_slice(x);
        }
        self.recent.push_back(f);
        if self.recent.len() > WINDOW + 1 {
            self.recent.pop_front();
        }
        if self.recent.len() <= WINDOW {
            return false;
        }
        let old = self.recent[0];
        (old - f).abs() <= self.tol * old.abs().max(f.abs()).max(1.0)
    }
}

/// Minimises `objective` from `initial`. The returned parameters are the
/// best seen, so never worse than the start.
pub fn minimize(objective: &dyn Objective, initial: &[f64], config: &OptimConfig) -> Result<(Vec<f64>, TrainTrace)> {
    config.validate()?;
    if initial.len() != objective.dim() {
        return Err(crate::error::mismatch(format!(
            "objective has {} parameters, initial point {}",
            objective.dim(),
            initial.len()
        )));
    }
    let start = Instant::now();
    let mut x = initial.to_vec();
    objective.project(&mut x);
    let (f0, g0) = objective.value_grad(&x)?;
    if !f0.is_finite() {
        return Err(Error::DivergedObjective(0));
    }
    check_grad(&g0)?;
    let mut tracker = Tracker::new(&x, f0, &g0, config.convergence_tol);
    match config.algorithm {
        Algorithm::Adam => adam(objective, x, f0, g0, config, &mut tracker)?,
        Algorithm::Lbfgs => lbfgs(objective, x, f0, g0, config, &mut tracker)?,
    }
    tracker.trace.wall_time = start.elapsed().as_secs_f64();
    Ok((tracker.best_x, tracker.trace))
}

fn adam(
    objective: &dyn Objective,
    mut x: Vec<f64>,
    _f: f64,
    mut g: Vec<f64>,
    config: &OptimConfig,
    tracker: &mut Tracker,
) -> Result<()> {
    let (b1, b2, eps) = (0.9, 0.999, 1e-8);
    let n = x.len();
    let mut m = vec![0.0; n];
    let mut v = vec![0.0; n];
    let mut lr = config.step_size;
    let mut t = 0i32;
    for iter in 1..=config.max_iters {
        let mut retries = 0;
        loop {
            let (mut m_new, mut v_new) = (m.clone(), v.clone());
            let tt = t + 1;
            let mut trial = x.clone();
            for i in 0..n {
                m_new[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v_new[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let mh = m_new[i] / (1.0 - b1.powi(tt));
                let vh = v_new[i] / (1.0 - b2.powi(tt));
                trial[i] -= lr * mh / (vh.sqrt() + eps);
            }
            objective.project(&mut trial);
            match try_eval(objective, &trial)? {
                Some((f_new, g_new)) => {
                    x = trial;
                    g = g_new;
                    m = m_new;
                    v = v_new;
                    t = tt;
                    if tracker.record(&x, f_new, &g) {
                        return Ok(());
                    }
                    break;
                }
                None => {
                    retries += 1;
                    if retries > MAX_STEP_RETRIES {
                        return Err(Error::DivergedObjective(iter));
                    }
                    // restart the moment estimates with a shorter step
                    lr *= 0.5;
                    m.iter_mut().for_each(|e| *e = 0.0);
                    v.iter_mut().for_each(|e| *e = 0.0);
                    t = 0;
                }
            }
        }
    }
    Ok(())
}

const LBFGS_MEMORY: usize = 10;

fn lbfgs(
    objective: &dyn Objective,
    mut x: Vec<f64>,
    mut f: f64,
    mut g: Vec<f64>,
    config: &OptimConfig,
    tracker: &mut Tracker,
) -> Result<()> {
    let mut s_hist: VecDeque<Vec<f64>> = VecDeque::new();
    let mut y_hist: VecDeque<Vec<f64>> = VecDeque::new();
    for iter in 1..=config.max_iters {
        if norm(&g) < 1e-12 {
            return Ok(());
        }
        // two-loop recursion
        let mut q = g.clone();
        let mut alphas = Vec::with_capacity(s_hist.len());
        for (s, y) in s_hist.iter().zip(&y_hist).rev() {
            let rho = 1.0 / dot(y, s);
            let a = rho * dot(s, &q);
            q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
            alphas.push(a);
        }
        let gamma = match (s_hist.back(), y_hist.back()) {
            (Some(s), Some(y)) => dot(s, y) / dot(y, y),
            _ => config.step_size / norm(&g).max(1.0),
        };
        q.iter_mut().for_each(|v| *v *= gamma);
        for ((s, y), a) in s_hist.iter().zip(&y_hist).zip(alphas.iter().rev()) {
            let rho = 1.0 / dot(y, s);
            let b = rho * dot(y, &q);
            q.iter_mut().zip(s).for_each(|(qi, si)| *qi += (a - b) * si);
        }
        let mut dir: Vec<f64> = q.iter().map(|v| -v).collect();
        let mut slope = dot(&dir, &g);
        if !(slope < 0.0) {
            s_hist.clear();
            y_hist.clear();
            let scale = config.step_size / norm(&g).max(1.0);
            dir = g.iter().map(|v| -scale * v).collect();
            slope = dot(&dir, &g);
        }

        // Armijo backtracking
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let mut trial: Vec<f64> = x.iter().zip(&dir).map(|(xi, di)| xi + step * di).collect();
            objective.project(&mut trial);
            if let Some((ft, gt)) = try_eval(objective, &trial)? {
                if ft <= f + 1e-4 * step * slope {
                    accepted = Some((trial, ft, gt));
                    break;
                }
            }
            step *= 0.5;
        }
        let Some((x_new, f_new, g_new)) = accepted else {
            if s_hist.is_empty() {
                // no progress possible along steepest descent
                return Ok(());
            }
            s_hist.clear();
            y_hist.clear();
            continue;
        };
        if !f_new.is_finite() {
            return Err(Error::DivergedObjective(iter));
        }
        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        if dot(&s, &y) > 1e-12 * norm(&s) * norm(&y) {
            if s_hist.len() == LBFGS_MEMORY {
                s_hist.pop_front();
                y_hist.pop_front();
            }
            s_hist.push_back(s);
            y_hist.push_back(y);
        }
        x = x_new;
        f = f_new;
        g = g_new;
        if tracker.record(&x, f, &g) {
            return Ok(());
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CoordinateError {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Coordinates sorted by decreasing relative error (at most ten).
    pub worst: Vec<CoordinateError>,
    pub passed: bool,
}

/// Compares the analytic gradient to central differences with step `h`.
pub fn grad_check(objective: &dyn Objective, params: &[f64], h: f64, rel_tol: f64) -> Result<GradCheckReport> {
    if !(h > 0.0) {
        return Err(Error::InvalidConfig(format!("finite-difference step must be positive, got {h}")));
    }
    let (_, analytic) = objective.value_grad(params)?;
    let mut errors = Vec::with_capacity(params.len());
    let mut x = params.to_vec();
    for i in 0..params.len() {
        x[i] = params[i] + h;
        let fp = objective.value(&x)?;
        x[i] = params[i] - h;
        let fm = objective.value(&x)?;
        x[i] = params[i];
        let numeric = (fp - fm) / (2.0 * h);
        let a = analytic[i];
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        let rel = if a.is_finite() && numeric.is_finite() {
            (a - numeric).abs() / denom
        } else {
            f64::INFINITY
        };
        errors.push(CoordinateError {
            index: i,
            analytic: a,
            numeric,
            rel_error: rel,
        });
    }
    errors.sort_by(|a, b| b.rel_error.total_cmp(&a.rel_error));
    let max_rel_error = errors.first().map_or(0.0, |e| e.rel_error);
    errors.truncate(10);
    Ok(GradCheckReport {
        max_rel_error,
        worst: errors,
        passed: max_rel_error <= rel_tol,
    })
}
