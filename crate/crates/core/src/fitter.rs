//! Robust multi-start fitting of scaling laws.
//!
//! The objective is `Σ huber_δ(ln L_pred − ln L_obs)`. Every point of a
//! per-parameter initialization grid is scored, as are `n_random_starts`
//! seeded random points; local search then runs from every random point and
//! from the `local_starts` best grid points. The global best wins, with
//! ties going to the lowest start index.

use std::collections::BTreeMap;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::laws::{LawParams, LawSpec, PreparedRun, EXPONENT_MAX};
use crate::optim::{nelder_mead, polish, Bound, NelderMeadConfig, PolishConfig};
use crate::run_data::{CorpusCatalog, Language, RunSet};

/// Smallest admissible exponent; the open lower end of (0, 2].
pub const EXPONENT_MIN: f64 = 1e-6;
pub const LAMBDA_RANGE: (f64, f64) = (1e-3, 1e3);

#[inline]
pub fn huber(r: f64, delta: f64) -> f64 {
    let a = r.abs();
    if a <= delta {
        0.5 * r * r
    } else {
        delta * (a - 0.5 * delta)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    /// Per-parameter initial values, overriding the built-in grid by name.
    pub init_grid: BTreeMap<String, Vec<f64>>,
    pub n_random_starts: usize,
    /// How many of the best grid points seed a local search.
    pub local_starts: usize,
    pub huber_delta: f64,
    pub max_iters: usize,
    pub convergence_tol: f64,
    pub seed: u64,
    /// Transfer scores used to initialize τ, keyed by language.
    pub tau_init: BTreeMap<Language, f64>,
    /// Gauss–Newton refinement after each simplex search.
    pub polish: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            init_grid: BTreeMap::new(),
            n_random_starts: 8,
            local_starts: 8,
            huber_delta: 1e-3,
            max_iters: 2000,
            convergence_tol: 1e-10,
            seed: 0,
            tau_init: BTreeMap::new(),
            polish: true,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.huber_delta > 0.0) {
            return Err(Error::invalid("huber_delta must be positive"));
        }
        if self.max_iters == 0 || self.local_starts + self.n_random_starts == 0 {
            return Err(Error::invalid("max_iters and the number of starts must be at least 1"));
        }
        if !(self.convergence_tol > 0.0) {
            return Err(Error::invalid("convergence_tol must be positive"));
        }
        if let Some((name, _)) = self.init_grid.iter().find(|(_, v)| v.is_empty() || v.iter().any(|x| !x.is_finite())) {
            return Err(Error::invalid(format!("init_grid entry `{name}` must be a non-empty list of finite values")));
        }
        Ok(())
    }
}

/// A parametric model of log-loss, as seen by the fitter.
pub trait FitProblem: Sync {
    fn parameter_names(&self) -> Vec<String>;
    fn bounds(&self) -> Vec<Bound>;
    /// Default initial values per parameter, before config overrides.
    fn default_grid(&self, config: &FitConfig) -> Vec<Vec<f64>>;
    fn n_observations(&self) -> usize;
    /// Fill `out` with `ln pred − ln obs` per observation. Returns `false`
    /// when the model is not evaluable at `theta`.
    fn log_residuals(&self, theta: &[f64], out: &mut Vec<f64>) -> bool;
    fn observed(&self) -> Vec<f64>;
}

fn objective_of<P: FitProblem + ?Sized>(problem: &P, theta: &[f64], delta: f64, buf: &mut Vec<f64>) -> f64 {
    if !problem.log_residuals(theta, buf) {
        return f64::INFINITY;
    }
    let mut total = 0.0;
    for r in buf.iter() {
        if !r.is_finite() {
            return f64::INFINITY;
        }
        total += huber(*r, delta);
    }
    total
}

/// Robust objective at a parameter vector.
pub fn robust_objective<P: FitProblem + ?Sized>(problem: &P, theta: &[f64], delta: f64) -> f64 {
    objective_of(problem, theta, delta, &mut Vec::new())
}

/// Best vector found by [`minimize`] plus diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct RawFit {
    pub theta: Vec<f64>,
    pub objective: f64,
    pub n_starts_tried: usize,
    pub best_start_index: usize,
    pub converged: bool,
    /// Objective at every initialization point, grid first then random.
    pub start_objectives: Vec<f64>,
}

fn cartesian(grid: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut points = vec![Vec::with_capacity(grid.len())];
    for values in grid {
        points = points
            .into_iter()
            .flat_map(|p| {
                values.iter().map(move |v| {
                    let mut q = p.clone();
                    q.push(*v);
                    q
                })
            })
            .collect();
    }
    points
}

struct LocalResult {
    start: usize,
    theta: Vec<f64>,
    objective: f64,
    converged: bool,
}

/// Multi-start minimization of the robust objective.
pub fn minimize<P: FitProblem>(problem: &P, config: &FitConfig) -> Result<RawFit> {
    config.validate()?;
    let names = problem.parameter_names();
    let bounds = problem.bounds();
    let dim = names.len();
    let required = dim + 1;
    if problem.n_observations() < required {
        return Err(Error::TooFewObservations {
            required,
            got: problem.n_observations(),
        });
    }

    let mut grid = problem.default_grid(config);
    for (i, name) in names.iter().enumerate() {
        if let Some(values) = config.init_grid.get(name) {
            grid[i] = values.clone();
        }
    }
    for (values, b) in grid.iter_mut().zip(&bounds) {
        for v in values.iter_mut() {
            *v = b.clamp(*v);
        }
    }

    let mut starts = cartesian(&grid);
    let n_grid = starts.len();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    for _ in 0..config.n_random_starts {
        let point = grid
            .iter()
            .zip(&bounds)
            .map(|(values, b)| {
                let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let (lo, hi) = match (hi > lo, b) {
                    (true, _) => (lo, hi),
                    (false, Bound::Interval(a, z)) => (*a, *z),
                    (false, _) => (lo, hi),
                };
                if hi > lo {
                    rng.random_range(lo..=hi)
                } else {
                    lo
                }
            })
            .collect();
        starts.push(point);
    }

    let delta = config.huber_delta;
    let start_objectives: Vec<f64> = starts
        .par_iter()
        .map_init(Vec::new, |buf, theta| objective_of(problem, theta, delta, buf))
        .collect();

    let mut grid_rank: Vec<usize> = (0..n_grid).filter(|i| start_objectives[*i].is_finite()).collect();
    grid_rank.sort_by(|a, b| start_objectives[*a].total_cmp(&start_objectives[*b]).then(a.cmp(b)));
    let mut chosen: Vec<usize> = grid_rank.into_iter().take(config.local_starts).collect();
    chosen.extend((n_grid..starts.len()).filter(|i| start_objectives[*i].is_finite()));
    if chosen.is_empty() {
        return Err(Error::FitFailed(format!(
            "all {} initial points give a non-finite objective; check that every run is evaluable and losses are positive",
            starts.len()
        )));
    }

    let nm_config = NelderMeadConfig {
        max_iters: config.max_iters,
        tol: config.convergence_tol,
        ..NelderMeadConfig::default()
    };
    let polish_config = PolishConfig {
        max_iters: 200,
        huber_delta: delta,
    };

    let locals: Vec<LocalResult> = chosen
        .par_iter()
        .map(|&start| {
            let mut buf = Vec::new();
            let nm = nelder_mead(|x| objective_of(problem, x, delta, &mut buf), &starts[start], &bounds, &nm_config);
            let (theta, objective, converged) = if config.polish && nm.value.is_finite() {
                let mut buf2 = Vec::new();
                let refined = polish(
                    |x, out| problem.log_residuals(x, out),
                    |x| objective_of(problem, x, delta, &mut buf2),
                    &nm.x,
                    &bounds,
                    &polish_config,
                );
                if refined.value < nm.value {
                    (refined.x, refined.value, nm.converged || refined.converged)
                } else {
                    (nm.x, nm.value, nm.converged)
                }
            } else {
                (nm.x, nm.value, nm.converged)
            };
            LocalResult {
                start,
                theta,
                objective,
                converged,
            }
        })
        .collect();

    let best = locals
        .into_iter()
        .filter(|l| l.objective.is_finite())
        .min_by(|a, b| a.objective.total_cmp(&b.objective).then(a.start.cmp(&b.start)))
        .ok_or_else(|| Error::FitFailed(format!("all {} local searches diverged", chosen.len())))?;

    Ok(RawFit {
        theta: best.theta,
        objective: best.objective,
        n_starts_tried: starts.len(),
        best_start_index: best.start,
        converged: best.converged,
        start_objectives,
    })
}

/// Result of fitting a law.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult<P> {
    pub params: P,
    pub objective: f64,
    pub n_starts_tried: usize,
    pub best_start_index: usize,
    pub converged: bool,
    /// R² of predicted vs observed loss on the fitted data; `None` when the
    /// observed losses have zero variance.
    pub train_r2: Option<f64>,
    pub n_observations: usize,
}

pub(crate) fn train_r2(log_residuals: &[f64], observed: &[f64]) -> Option<f64> {
    let predicted: Vec<f64> = log_residuals.iter().zip(observed).map(|(r, o)| o * r.exp()).collect();
    crate::holdout_eval::r_squared(&predicted, observed).ok()
}

/// The built-in law variants as a fit problem over prepared runs.
#[derive(Debug, Clone)]
pub struct LawProblem {
    spec: LawSpec,
    runs: Vec<PreparedRun>,
    ln_n: Vec<f64>,
    ln_obs: Vec<f64>,
    observed: Vec<f64>,
}

impl LawProblem {
    pub fn new(runs: &RunSet, spec: &LawSpec, catalog: &CorpusCatalog) -> Result<Self> {
        let prepared = runs
            .iter()
            .map(|r| PreparedRun::prepare(r, spec, catalog))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            spec: spec.clone(),
            ln_n: prepared.iter().map(|p| p.n_params.ln()).collect(),
            runs: prepared,
            ln_obs: runs.iter().map(|r| r.loss.ln()).collect(),
            observed: runs.iter().map(|r| r.loss).collect(),
        })
    }

    pub fn spec(&self) -> &LawSpec {
        &self.spec
    }

    fn lambda_index(&self) -> Option<usize> {
        self.spec.variant.uses_saturation().then_some(5)
    }

    fn tau_range(&self) -> std::ops::Range<usize> {
        let start = 5 + usize::from(self.spec.variant.uses_saturation());
        start..start + self.spec.transfer_set.len()
    }

    fn tau_other_index(&self) -> Option<usize> {
        self.spec.variant.uses_other().then(|| self.tau_range().end)
    }

    pub fn params_from_vector(&self, theta: &[f64]) -> LawParams {
        let taus = &theta[self.tau_range()];
        LawParams {
            variant: self.spec.variant,
            e_irreducible: theta[0],
            log_a: theta[1],
            log_b: theta[2],
            alpha: theta[3],
            beta: theta[4],
            lambda: self.lambda_index().map(|i| theta[i].exp()),
            tau_transfer: self.spec.transfer_set.iter().cloned().zip(taus.iter().copied()).collect(),
            tau_other: self.tau_other_index().map(|i| theta[i]),
        }
    }

    pub fn vector_from_params(&self, params: &LawParams) -> Result<Vec<f64>> {
        if params.variant != self.spec.variant {
            return Err(Error::invalid(format!(
                "parameters are for {} but the spec is {}",
                params.variant, self.spec.variant
            )));
        }
        params.validate()?;
        let mut theta = vec![params.e_irreducible, params.log_a, params.log_b, params.alpha, params.beta];
        if let Some(l) = params.lambda {
            theta.push(l.ln());
        }
        for lang in &self.spec.transfer_set {
            theta.push(
                *params
                    .tau_transfer
                    .get(lang)
                    .ok_or_else(|| Error::invalid(format!("no tau for transfer language `{lang}`")))?,
            );
        }
        if let Some(t) = params.tau_other {
            theta.push(t);
        }
        Ok(theta)
    }

    /// Log predictions for every prepared run.
    pub fn log_predictions(&self, theta: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.runs.len());
        self.fill_log_predictions(theta, &mut out);
        out
    }

    fn fill_log_predictions(&self, theta: &[f64], out: &mut Vec<f64>) {
        out.clear();
        let variant = self.spec.variant;
        let (e, log_a, log_b, alpha, beta) = (theta[0], theta[1], theta[2], theta[3], theta[4]);
        let lambda = self.lambda_index().map_or(1.0, |i| theta[i].exp());
        let taus = &theta[self.tau_range()];
        let tau_other = self.tau_other_index().map_or(0.0, |i| theta[i]);
        for (run, ln_n) in self.runs.iter().zip(&self.ln_n) {
            let d_eff = run.effective_data(variant, lambda, taus, tau_other);
            let loss = e + (log_a - alpha * ln_n).exp() + (log_b - beta * d_eff.ln()).exp();
            out.push(loss.ln());
        }
    }
}

impl FitProblem for LawProblem {
    fn parameter_names(&self) -> Vec<String> {
        let mut names: Vec<String> = ["e", "log_a", "log_b", "alpha", "beta"].iter().map(|s| s.to_string()).collect();
        if self.spec.variant.uses_saturation() {
            names.push("log_lambda".into());
        }
        names.extend(self.spec.transfer_set.iter().map(|l| format!("tau_{l}")));
        if self.spec.variant.uses_other() {
            names.push("tau_other".into());
        }
        names
    }

    fn bounds(&self) -> Vec<Bound> {
        let mut b = vec![
            Bound::Lower(0.0),
            Bound::Free,
            Bound::Free,
            Bound::Interval(EXPONENT_MIN, EXPONENT_MAX),
            Bound::Interval(EXPONENT_MIN, EXPONENT_MAX),
        ];
        if self.spec.variant.uses_saturation() {
            b.push(Bound::Interval(LAMBDA_RANGE.0.ln(), LAMBDA_RANGE.1.ln()));
        }
        b.extend(self.spec.transfer_set.iter().map(|_| Bound::Interval(0.0, 1.0)));
        if self.spec.variant.uses_other() {
            b.push(Bound::Interval(0.0, 1.0));
        }
        b
    }

    fn default_grid(&self, config: &FitConfig) -> Vec<Vec<f64>> {
        let mut grid = vec![
            vec![0.0, 0.5, 1.0],
            vec![2.0, 6.0, 10.0, 14.0],
            vec![2.0, 6.0, 10.0, 14.0],
            vec![0.2, 0.35, 0.5, 0.7],
            vec![0.2, 0.35, 0.5, 0.7],
        ];
        if self.spec.variant.uses_saturation() {
            grid.push(vec![0.5f64.ln(), 0.0, 4.0f64.ln()]);
        }
        for lang in &self.spec.transfer_set {
            let tau = config.tau_init.get(lang).map_or(0.1, |s| s.clamp(0.0, 1.0));
            grid.push(vec![tau]);
        }
        if self.spec.variant.uses_other() {
            grid.push(vec![0.1]);
        }
        grid
    }

    fn n_observations(&self) -> usize {
        self.runs.len()
    }

    fn log_residuals(&self, theta: &[f64], out: &mut Vec<f64>) -> bool {
        self.fill_log_predictions(theta, out);
        for (r, obs) in out.iter_mut().zip(&self.ln_obs) {
            *r -= obs;
        }
        true
    }

    fn observed(&self) -> Vec<f64> {
        self.observed.clone()
    }
}

/// Fit one law variant to a set of runs.
pub fn fit(runs: &RunSet, spec: &LawSpec, catalog: &CorpusCatalog, config: &FitConfig) -> Result<FitResult<LawParams>> {
    let problem = LawProblem::new(runs, spec, catalog)?;
    let raw = minimize(&problem, config)?;
    let params = problem.params_from_vector(&raw.theta);
    let mut res = Vec::new();
    problem.log_residuals(&raw.theta, &mut res);
    Ok(FitResult {
        params,
        objective: raw.objective,
        n_starts_tried: raw.n_starts_tried,
        best_start_index: raw.best_start_index,
        converged: raw.converged,
        train_r2: train_r2(&res, &problem.observed),
        n_observations: problem.n_observations(),
    })
}

/// `ln L_pred − ln L_obs` per run, in run order.
pub fn residuals(params: &LawParams, spec: &LawSpec, runs: &RunSet, catalog: &CorpusCatalog) -> Result<Vec<f64>> {
    params.validate()?;
    let problem = LawProblem::new(runs, spec, catalog)?;
    let theta = problem.vector_from_params(params)?;
    let mut out = Vec::new();
    problem.log_residuals(&theta, &mut out);
    Ok(out)
}

/// Predicted loss per run, in run order.
pub fn predict_runs(params: &LawParams, spec: &LawSpec, runs: &RunSet, catalog: &CorpusCatalog) -> Result<Vec<f64>> {
    let problem = LawProblem::new(runs, spec, catalog)?;
    let theta = problem.vector_from_params(params)?;
    Ok(problem.log_predictions(&theta).into_iter().map(f64::exp).collect())
}

/// Sidecar CSV: run_id, n_params, total_tokens, observed, predicted, log_residual.
pub fn write_residuals_csv(params: &LawParams, spec: &LawSpec, runs: &RunSet, catalog: &CorpusCatalog, sink: impl Write) -> Result<()> {
    let predicted = predict_runs(params, spec, runs, catalog)?;
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(["run_id", "mixture_id", "n_params", "total_tokens", "observed", "predicted", "log_residual"])?;
    for (r, p) in runs.iter().zip(&predicted) {
        w.write_record([
            r.run_id.clone(),
            r.mixture_id.clone(),
            r.n_params.to_string(),
            r.total_tokens.to_string(),
            format!("{:?}", r.loss),
            format!("{p:?}"),
            format!("{:?}", p.ln() - r.loss.ln()),
        ])?;
    }
    w.flush()?;
    Ok(())
}
