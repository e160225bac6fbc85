//! Capacity law for a model serving K languages, and iso-loss planning.
//!
//! `L(K, N, D_t) = L_∞ + A·K^φ/N^α + B·K^ψ/D_t^β`
//!
//! Growing the language count from K to rK while holding per-language loss
//! fixed traces a frontier of (model, data) multipliers `(s, t)`:
//!
//! `r^φ·w_N·s^{−α} + r^ψ·w_D·t^{−β} = 1`
//!
//! where `w_N`, `w_D` are the baseline's shares of reducible loss. From a
//! compute-optimal baseline the cheapest frontier point is
//! `(s, t) = (r^{φ/α}, r^{ψ/β})`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fitter::{minimize, train_r2, FitConfig, FitProblem, FitResult, EXPONENT_MIN};
use crate::laws::{chinchilla_form, EXPONENT_MAX};
use crate::optim::Bound;
use crate::run_data::{Language, RunSet};

pub const PLAN_SCHEMA_VERSION: &str = "atlas-kit.plan/1";
pub const FRONTIER_POINTS: usize = 64;
const UNIFORM_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapacityParams {
    pub l_inf: f64,
    pub log_a: f64,
    pub log_b: f64,
    pub alpha: f64,
    pub beta: f64,
    pub phi: f64,
    pub psi: f64,
}

impl CapacityParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.l_inf >= 0.0 && self.l_inf.is_finite()) {
            return Err(Error::domain("L_inf must be >= 0"));
        }
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !(v > 0.0 && v <= EXPONENT_MAX) {
                return Err(Error::domain(format!("{name} must lie in (0, {EXPONENT_MAX}], got {v}")));
            }
        }
        if ![self.log_a, self.log_b, self.phi, self.psi].iter().all(|v| v.is_finite()) {
            return Err(Error::domain("capacity parameters must be finite"));
        }
        Ok(())
    }

    pub fn exponents(&self) -> Exponents {
        Exponents {
            alpha: self.alpha,
            beta: self.beta,
            phi: self.phi,
            psi: self.psi,
        }
    }

    fn terms(&self, k: f64, n: f64, d_t: f64) -> Result<(f64, f64)> {
        check_domain(k, n, d_t)?;
        let n_term = (self.log_a + self.phi * k.ln() - self.alpha * n.ln()).exp();
        let d_term = (self.log_b + self.psi * k.ln() - self.beta * d_t.ln()).exp();
        Ok((n_term, d_term))
    }
}

/// The four exponents the planner needs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Exponents {
    pub alpha: f64,
    pub beta: f64,
    pub phi: f64,
    pub psi: f64,
}

impl Exponents {
    fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.beta > 0.0) {
            return Err(Error::domain("alpha and beta must be positive"));
        }
        if !(self.phi.is_finite() && self.psi.is_finite()) {
            return Err(Error::domain("phi and psi must be finite"));
        }
        Ok(())
    }
}

fn check_domain(k: f64, n: f64, d_t: f64) -> Result<()> {
    if !(k >= 1.0) {
        return Err(Error::domain(format!("language count must be >= 1, got {k}")));
    }
    if !(n > 0.0 && d_t > 0.0) {
        return Err(Error::domain(format!("N and D_t must be positive, got N={n}, D_t={d_t}")));
    }
    Ok(())
}

fn check_ratio(r: f64) -> Result<()> {
    if r > 0.0 && r.is_finite() {
        Ok(())
    } else {
        Err(Error::domain(format!("language ratio r must be positive, got {r}")))
    }
}

pub fn predict_capacity_loss(p: &CapacityParams, k: f64, n: f64, d_t: f64) -> Result<f64> {
    let (n_term, d_term) = p.terms(k, n, d_t)?;
    Ok(p.l_inf + n_term + d_term)
}

/// Shares of reducible loss carried by the model-size and data terms.
pub fn baseline_weights(p: &CapacityParams, k: f64, n: f64, d_t: f64) -> Result<(f64, f64)> {
    let (n_term, d_term) = p.terms(k, n, d_t)?;
    let total = n_term + d_term;
    if !(total > 0.0) {
        return Err(Error::domain("both loss terms are zero; weights undefined"));
    }
    let w_n = n_term / total;
    Ok((w_n, 1.0 - w_n))
}

/// Weights at a compute-optimal baseline: `w_N = β/(α+β)`.
pub fn compute_optimal_weights(alpha: f64, beta: f64) -> Result<(f64, f64)> {
    if !(alpha > 0.0 && beta > 0.0) {
        return Err(Error::domain("alpha and beta must be positive"));
    }
    let w_n = beta / (alpha + beta);
    Ok((w_n, 1.0 - w_n))
}

/// Which multiplier is known when solving the iso-loss constraint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Given {
    /// Model-size multiplier `s = N'/N`.
    S(f64),
    /// Per-language data multiplier `t = D'/D`.
    T(f64),
}

/// Solve the iso-loss constraint for the other multiplier.
pub fn isoloss_solve(exps: &Exponents, r: f64, w_n: f64, w_d: f64, given: Given) -> Result<f64> {
    exps.validate()?;
    check_ratio(r)?;
    let a_n = r.powf(exps.phi) * w_n;
    let a_d = r.powf(exps.psi) * w_d;
    match given {
        Given::S(s) => {
            if !(s > 0.0) {
                return Err(Error::domain(format!("s must be positive, got {s}")));
            }
            let denom = 1.0 - a_n * s.powf(-exps.alpha);
            if !(denom > 0.0) {
                return Err(Error::Infeasible(format!(
                    "s^alpha = {} must exceed r^phi·w_N = {a_n}",
                    s.powf(exps.alpha)
                )));
            }
            Ok((a_d / denom).powf(1.0 / exps.beta))
        }
        Given::T(t) => {
            if !(t > 0.0) {
                return Err(Error::domain(format!("t must be positive, got {t}")));
            }
            let denom = 1.0 - a_d * t.powf(-exps.beta);
            if !(denom > 0.0) {
                return Err(Error::Infeasible(format!(
                    "t^beta = {} must exceed r^psi·w_D = {a_d}",
                    t.powf(exps.beta)
                )));
            }
            Ok((a_n / denom).powf(1.0 / exps.alpha))
        }
    }
}

/// Left-hand side of the normalized iso-loss constraint minus one.
pub fn isoloss_residual(exps: &Exponents, r: f64, w_n: f64, w_d: f64, s: f64, t: f64) -> f64 {
    r.powf(exps.phi) * w_n * s.powf(-exps.alpha) + r.powf(exps.psi) * w_d * t.powf(-exps.beta) - 1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Multipliers {
    pub n_ratio: f64,
    pub d_t_ratio: f64,
    pub d_tot_ratio: f64,
    pub c_ratio: f64,
}

impl Multipliers {
    fn from_st(s: f64, t: f64, r: f64) -> Self {
        let d_tot_ratio = r * t;
        Self {
            n_ratio: s,
            d_t_ratio: t,
            d_tot_ratio,
            c_ratio: s * d_tot_ratio,
        }
    }
}

/// Closed-form optimum from the exponent ratios `φ/α` and `ψ/β`.
pub fn multipliers_from_ratios(phi_over_alpha: f64, psi_over_beta: f64, r: f64) -> Result<Multipliers> {
    check_ratio(r)?;
    if !(phi_over_alpha.is_finite() && psi_over_beta.is_finite()) {
        return Err(Error::domain("exponent ratios must be finite"));
    }
    Ok(Multipliers::from_st(r.powf(phi_over_alpha), r.powf(psi_over_beta), r))
}

/// Minimum-compute multipliers when starting from a compute-optimal baseline.
pub fn compute_optimal_multipliers(phi: f64, psi: f64, alpha: f64, beta: f64, r: f64) -> Result<Multipliers> {
    Exponents { alpha, beta, phi, psi }.validate()?;
    multipliers_from_ratios(phi / alpha, psi / beta, r)
}

/// `(∂L/∂ln N, ∂L/∂ln D_t)`.
pub fn marginal_sensitivities(p: &CapacityParams, k: f64, n: f64, d_t: f64) -> Result<(f64, f64)> {
    let (n_term, d_term) = p.terms(k, n, d_t)?;
    Ok((-p.alpha * n_term, -p.beta * d_term))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrontierPoint {
    pub s: f64,
    pub t: f64,
    pub d_tot_ratio: f64,
    pub c_ratio: f64,
}

/// Smallest feasible model multiplier: `(r^φ·w_N)^{1/α}`.
pub fn feasibility_bound(exps: &Exponents, r: f64, w_n: f64) -> f64 {
    (r.powf(exps.phi) * w_n).powf(1.0 / exps.alpha)
}

/// Frontier points at the given `s` values; infeasible values are an error.
pub fn frontier_at(exps: &Exponents, r: f64, w_n: f64, w_d: f64, s_values: &[f64]) -> Result<Vec<FrontierPoint>> {
    s_values
        .iter()
        .map(|&s| {
            let t = isoloss_solve(exps, r, w_n, w_d, Given::S(s))?;
            let m = Multipliers::from_st(s, t, r);
            Ok(FrontierPoint {
                s,
                t,
                d_tot_ratio: m.d_tot_ratio,
                c_ratio: m.c_ratio,
            })
        })
        .collect()
}

/// `FRONTIER_POINTS` log-spaced `s` values spanning two decades above the
/// feasibility bound.
pub fn default_sweep(exps: &Exponents, r: f64, w_n: f64) -> Vec<f64> {
    let lo = feasibility_bound(exps, r, w_n) * (1.0 + 1e-3);
    let (a, b) = (lo.ln(), (lo * 100.0).ln());
    (0..FRONTIER_POINTS)
        .map(|i| (a + (b - a) * i as f64 / (FRONTIER_POINTS - 1) as f64).exp())
        .collect()
}

/// Cheapest frontier point for an arbitrary baseline, by golden-section
/// search on `ln s` (the compute ratio is unimodal there).
pub fn min_compute_point(exps: &Exponents, r: f64, w_n: f64, w_d: f64) -> Result<Multipliers> {
    exps.validate()?;
    check_ratio(r)?;
    let cost = |u: f64| -> f64 {
        let s = u.exp();
        match isoloss_solve(exps, r, w_n, w_d, Given::S(s)) {
            Ok(t) => u + t.ln(),
            Err(_) => f64::INFINITY,
        }
    };
    let u_min = feasibility_bound(exps, r, w_n).ln();
    let mut lo = u_min + 1e-12 * (1.0 + u_min.abs());
    let mut step = 1.0;
    let mut hi = lo + step;
    // Expand until the cost turns upward.
    while cost(hi + step) < cost(hi) && step < 1e4 {
        lo = hi;
        hi += step;
        step *= 2.0;
    }
    hi += step;
    lo = lo.max(u_min + 1e-12 * (1.0 + u_min.abs()));
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (lo, hi);
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (cost(c), cost(d));
    for _ in 0..300 {
        if (b - a).abs() < 1e-14 * (1.0 + a.abs()) {
            break;
        }
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = cost(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = cost(d);
        }
    }
    let s = (0.5 * (a + b)).exp();
    let t = isoloss_solve(exps, r, w_n, w_d, Given::S(s))?;
    Ok(Multipliers::from_st(s, t, r))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Baseline {
    ComputeOptimal,
    Explicit { k: f64, n: f64, d_t: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanQuery {
    pub r: f64,
    pub baseline: Baseline,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanReport {
    pub r: f64,
    pub exponents: Exponents,
    pub w_n: f64,
    pub w_d: f64,
    /// Closed form at a compute-optimal baseline, numerical otherwise.
    pub optimum: Multipliers,
    pub optimum_method: String,
    pub frontier: Vec<FrontierPoint>,
}

/// Answer a planning query. An explicit baseline needs full parameters
/// to compute the term weights.
pub fn plan(exps: &Exponents, params: Option<&CapacityParams>, query: &PlanQuery) -> Result<PlanReport> {
    exps.validate()?;
    check_ratio(query.r)?;
    let (w_n, w_d, optimum, method) = match &query.baseline {
        Baseline::ComputeOptimal => {
            let (w_n, w_d) = compute_optimal_weights(exps.alpha, exps.beta)?;
            let m = compute_optimal_multipliers(exps.phi, exps.psi, exps.alpha, exps.beta, query.r)?;
            (w_n, w_d, m, "closed_form")
        }
        Baseline::Explicit { k, n, d_t } => {
            let p = params.ok_or_else(|| Error::invalid("an explicit baseline needs capacity parameters"))?;
            let (w_n, w_d) = baseline_weights(p, *k, *n, *d_t)?;
            let m = min_compute_point(exps, query.r, w_n, w_d)?;
            (w_n, w_d, m, "golden_section")
        }
    };
    let sweep = query.sweep.clone().unwrap_or_else(|| default_sweep(exps, query.r, w_n));
    let frontier = frontier_at(exps, query.r, w_n, w_d, &sweep)?;
    Ok(PlanReport {
        r: query.r,
        exponents: *exps,
        w_n,
        w_d,
        optimum,
        optimum_method: method.to_string(),
        frontier,
    })
}

pub fn write_frontier_csv(frontier: &[FrontierPoint], sink: impl std::io::Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(["s", "t", "d_tot_ratio", "c_ratio"])?;
    for p in frontier {
        w.write_record([p.s, p.t, p.d_tot_ratio, p.c_ratio].map(|v| format!("{v:?}")))?;
    }
    w.flush()?;
    Ok(())
}

/// One (K, N, D_t, loss) tuple for capacity fitting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapacityObservation {
    pub language: Language,
    pub k: f64,
    pub n: f64,
    pub d_t: f64,
    pub loss: f64,
}

/// Observations from runs on uniform mixtures, with `D_t = D_tot / K`.
/// `language = None` pools every eval language.
pub fn capacity_observations(runs: &RunSet, language: Option<&str>) -> Vec<CapacityObservation> {
    runs.iter()
        .filter(|r| language.is_none_or(|l| r.eval_language == l))
        .filter(|r| r.contains_language(&r.eval_language))
        .filter_map(|r| {
            let weights: Vec<f64> = r.mixture_languages().map(|l| r.sampling_weights[l]).collect();
            let k = weights.len();
            let uniform = weights.iter().all(|w| (w - 1.0 / k as f64).abs() <= UNIFORM_TOL);
            (uniform && r.total_tokens > 0).then(|| CapacityObservation {
                language: r.eval_language.clone(),
                k: k as f64,
                n: r.n_params as f64,
                d_t: r.total_tokens as f64 / k as f64,
                loss: r.loss,
            })
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct CapacityProblem {
    obs: Vec<CapacityObservation>,
    ln: Vec<(f64, f64, f64)>,
    ln_obs: Vec<f64>,
}

impl CapacityProblem {
    pub fn new(obs: Vec<CapacityObservation>) -> Self {
        let ln = obs.iter().map(|o| (o.k.ln(), o.n.ln(), o.d_t.ln())).collect();
        let ln_obs = obs.iter().map(|o| o.loss.ln()).collect();
        Self { obs, ln, ln_obs }
    }

    pub fn params_from_vector(theta: &[f64]) -> CapacityParams {
        CapacityParams {
            l_inf: theta[0],
            log_a: theta[1],
            log_b: theta[2],
            alpha: theta[3],
            beta: theta[4],
            phi: theta[5],
            psi: theta[6],
        }
    }
}

impl FitProblem for CapacityProblem {
    fn parameter_names(&self) -> Vec<String> {
        ["l_inf", "log_a", "log_b", "alpha", "beta", "phi", "psi"]
            .iter()
            .map(|s| s.to_string())
            .collect()
    }

    fn bounds(&self) -> Vec<Bound> {
        vec![
            Bound::Lower(0.0),
            Bound::Free,
            Bound::Free,
            Bound::Interval(EXPONENT_MIN, EXPONENT_MAX),
            Bound::Interval(EXPONENT_MIN, EXPONENT_MAX),
            Bound::Interval(-2.0, 2.0),
            Bound::Interval(-2.0, 2.0),
        ]
    }

    fn default_grid(&self, _config: &FitConfig) -> Vec<Vec<f64>> {
        vec![
            vec![0.0, 0.5, 1.0],
            vec![2.0, 6.0, 10.0, 14.0],
            vec![2.0, 6.0, 10.0, 14.0],
            vec![0.2, 0.35, 0.5, 0.7],
            vec![0.2, 0.35, 0.5, 0.7],
            vec![0.0, 0.2],
            vec![-0.1, 0.1],
        ]
    }

    fn n_observations(&self) -> usize {
        self.obs.len()
    }

    fn log_residuals(&self, theta: &[f64], out: &mut Vec<f64>) -> bool {
        out.clear();
        let (l_inf, log_a, log_b, alpha, beta, phi, psi) = (theta[0], theta[1], theta[2], theta[3], theta[4], theta[5], theta[6]);
        for ((ln_k, ln_n, ln_d), obs) in self.ln.iter().zip(&self.ln_obs) {
            let loss = l_inf + (log_a + phi * ln_k - alpha * ln_n).exp() + (log_b + psi * ln_k - beta * ln_d).exp();
            out.push(loss.ln() - obs);
        }
        true
    }

    fn observed(&self) -> Vec<f64> {
        self.obs.iter().map(|o| o.loss).collect()
    }
}

pub fn fit_capacity(obs: Vec<CapacityObservation>, config: &FitConfig) -> Result<FitResult<CapacityParams>> {
    let problem = CapacityProblem::new(obs);
    let raw = minimize(&problem, config)?;
    let mut res = Vec::new();
    problem.log_residuals(&raw.theta, &mut res);
    Ok(FitResult {
        params: CapacityProblem::params_from_vector(&raw.theta),
        objective: raw.objective,
        n_starts_tried: raw.n_starts_tried,
        best_start_index: raw.best_start_index,
        converged: raw.converged,
        train_r2: train_r2(&res, &problem.observed()),
        n_observations: problem.n_observations(),
    })
}

/// Fit one capacity law per eval language plus a pooled fit over all of them.
pub fn fit_capacity_per_language(runs: &RunSet, config: &FitConfig) -> Result<(BTreeMap<Language, FitResult<CapacityParams>>, FitResult<CapacityParams>)> {
    let mut per = BTreeMap::new();
    for lang in runs.eval_languages() {
        let obs = capacity_observations(runs, Some(&lang));
        if obs.is_empty() {
            continue;
        }
        per.insert(lang, fit_capacity(obs, config)?);
    }
    let pooled = fit_capacity(capacity_observations(runs, None), config)?;
    Ok((per, pooled))
}

/// The capacity law at K = 1, written in the baseline's form.
pub fn chinchilla_equivalent(p: &CapacityParams, n: f64, d_t: f64) -> f64 {
    chinchilla_form(p.l_inf, p.log_a, p.log_b, p.alpha, p.beta, n, d_t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::laws::{predict_loss, LawParams, Variant};

    fn params() -> CapacityParams {
        CapacityParams {
            l_inf: 1.1,
            log_a: 6.0,
            log_b: 7.5,
            alpha: 0.35,
            beta: 0.3,
            phi: 0.11,
            psi: -0.04,
        }
    }

    #[test]
    fn reduces_to_chinchilla_at_one_language() {
        let p = params();
        let bsl = LawParams {
            variant: Variant::Bsl,
            e_irreducible: p.l_inf,
            log_a: p.log_a,
            log_b: p.log_b,
            alpha: p.alpha,
            beta: p.beta,
            lambda: None,
            tau_transfer: Default::default(),
            tau_other: None,
        };
        for (n, d) in [(1e8, 1e9), (3e9, 2e11)] {
            let cap = predict_capacity_loss(&p, 1.0, n, d).unwrap();
            let base = predict_loss(&bsl, n, d).unwrap();
            assert!((cap - base).abs() < 1e-12 * base);
            assert!((chinchilla_equivalent(&p, n, d) - base).abs() < 1e-12 * base);
        }
    }

    #[test]
    fn zero_exponents_ignore_language_count() {
        let p = CapacityParams { phi: 0.0, psi: 0.0, ..params() };
        let a = predict_capacity_loss(&p, 1.0, 1e9, 1e10).unwrap();
        let b = predict_capacity_loss(&p, 50.0, 1e9, 1e10).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn doubling_k_with_unit_phi_doubles_n_term() {
        let p = CapacityParams { phi: 1.0, psi: 0.0, ..params() };
        let (n1, d1) = p.terms(3.0, 1e9, 1e10).unwrap();
        let (n2, d2) = p.terms(6.0, 1e9, 1e10).unwrap();
        assert!((n2 - 2.0 * n1).abs() < 1e-12 * n2);
        assert!((d2 - d1).abs() < 1e-15);
    }

    #[test]
    fn domain_errors() {
        assert!(predict_capacity_loss(&params(), 0.5, 1e9, 1e9).is_err());
        assert!(predict_capacity_loss(&params(), 1.0, 0.0, 1e9).is_err());
    }

    #[test]
    fn weight_examples() {
        let (w_n, w_d) = compute_optimal_weights(0.3, 0.3).unwrap();
        assert_eq!((w_n, w_d), (0.5, 0.5));
        let (w_n, _) = compute_optimal_weights(0.3, 0.6).unwrap();
        assert!((w_n - 2.0 / 3.0).abs() < 1e-15);
        // Equal terms: choose D so that B/D^β = A/N^α.
        let p = CapacityParams { phi: 0.0, psi: 0.0, ..params() };
        let n: f64 = 1e9;
        let n_term = (p.log_a - p.alpha * n.ln()).exp();
        let d = ((p.log_b - n_term.ln()) / p.beta).exp();
        let (w_n, w_d) = baseline_weights(&p, 1.0, n, d).unwrap();
        assert!((w_n - 0.5).abs() < 1e-12 && (w_d - 0.5).abs() < 1e-12);
    }

    #[test]
    fn isoloss_identity_and_limit() {
        let e = Exponents { alpha: 0.35, beta: 0.3, phi: 0.11, psi: -0.04 };
        let t = isoloss_solve(&e, 1.0, 0.4, 0.6, Given::S(1.0)).unwrap();
        assert!((t - 1.0).abs() < 1e-12);
        let r: f64 = 4.0;
        let limit = (r.powf(e.psi) * 0.6).powf(1.0 / e.beta);
        let t_far = isoloss_solve(&e, r, 0.4, 0.6, Given::S(1e40)).unwrap();
        assert!((t_far - limit).abs() < 1e-6 * limit);
    }

    #[test]
    fn isoloss_blows_up_at_feasibility_boundary() {
        let e = Exponents { alpha: 0.35, beta: 0.3, phi: 0.11, psi: -0.04 };
        let (r, w_n, w_d) = (4.0, 0.46, 0.54);
        let bound = feasibility_bound(&e, r, w_n);
        let mut prev = 0.0;
        for eps in [1e-1, 1e-2, 1e-3, 1e-4, 1e-6] {
            let t = isoloss_solve(&e, r, w_n, w_d, Given::S(bound * (1.0 + eps))).unwrap();
            assert!(t > prev);
            prev = t;
        }
        assert!(prev > 1e6);
        assert!(matches!(isoloss_solve(&e, r, w_n, w_d, Given::S(bound * (1.0 - 1e-9))), Err(Error::Infeasible(_))));
        assert!(matches!(isoloss_solve(&e, r, w_n, w_d, Given::T(1e-9)), Err(Error::Infeasible(_))));
    }

    #[test]
    fn multipliers_trivial_and_sign() {
        let m = compute_optimal_multipliers(0.1, -0.05, 0.3, 0.3, 1.0).unwrap();
        assert_eq!((m.n_ratio, m.d_t_ratio, m.d_tot_ratio, m.c_ratio), (1.0, 1.0, 1.0, 1.0));
        let m = compute_optimal_multipliers(0.11, -0.04, 0.3, 0.3, 8.0).unwrap();
        assert!(m.d_t_ratio < 1.0);
        assert_eq!(m.c_ratio, m.n_ratio * m.d_tot_ratio);
    }

    #[test]
    fn optimum_restores_each_term() {
        let e = Exponents { alpha: 0.35, beta: 0.3, phi: 0.11, psi: -0.04 };
        let (w_n, w_d) = compute_optimal_weights(e.alpha, e.beta).unwrap();
        let r: f64 = 6.0;
        let (s, t) = (r.powf(e.phi / e.alpha), r.powf(e.psi / e.beta));
        assert!(isoloss_residual(&e, r, w_n, w_d, s, t).abs() < 1e-12);
        assert!((r.powf(e.phi) * s.powf(-e.alpha) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn numerical_optimum_matches_closed_form() {
        let e = Exponents { alpha: 0.35, beta: 0.3, phi: 0.11, psi: -0.04 };
        let (w_n, w_d) = compute_optimal_weights(e.alpha, e.beta).unwrap();
        let closed = compute_optimal_multipliers(e.phi, e.psi, e.alpha, e.beta, 4.0).unwrap();
        let numeric = min_compute_point(&e, 4.0, w_n, w_d).unwrap();
        assert!((closed.n_ratio - numeric.n_ratio).abs() < 1e-6 * closed.n_ratio);
        assert!((closed.c_ratio - numeric.c_ratio).abs() < 1e-9 * closed.c_ratio);
    }

    #[test]
    fn sensitivities_match_finite_differences() {
        let p = params();
        let (k, n, d) = (5.0, 2e9, 3e10);
        let (sn, sd) = marginal_sensitivities(&p, k, n, d).unwrap();
        let h = 1e-5;
        let f = |ln_n: f64, ln_d: f64| predict_capacity_loss(&p, k, ln_n.exp(), ln_d.exp()).unwrap();
        let fd_n = (f(n.ln() + h, d.ln()) - f(n.ln() - h, d.ln())) / (2.0 * h);
        let fd_d = (f(n.ln(), d.ln() + h) - f(n.ln(), d.ln() - h)) / (2.0 * h);
        assert!((sn - fd_n).abs() < 1e-6 * sn.abs());
        assert!((sd - fd_d).abs() < 1e-6 * sd.abs());
        let far = marginal_sensitivities(&p, k, 1e200, d).unwrap();
        assert!(far.0.abs() < 1e-30);
    }

    #[test]
    fn plan_sweep_has_64_feasible_points() {
        let e = Exponents { alpha: 0.35, beta: 0.3, phi: 0.11, psi: -0.04 };
        let report = plan(&e, None, &PlanQuery { r: 4.0, baseline: Baseline::ComputeOptimal, sweep: None }).unwrap();
        assert_eq!(report.frontier.len(), FRONTIER_POINTS);
        for p in &report.frontier {
            assert!(isoloss_residual(&e, 4.0, report.w_n, report.w_d, p.s, p.t).abs() < 1e-9);
        }
        let best = report.frontier.iter().map(|p| p.c_ratio).fold(f64::INFINITY, f64::min);
        assert!(report.optimum.c_ratio <= best * (1.0 + 1e-12));
    }

    #[test]
    fn explicit_baseline_needs_params() {
        let e = params().exponents();
        let q = PlanQuery { r: 2.0, baseline: Baseline::Explicit { k: 4.0, n: 1e9, d_t: 1e10 }, sweep: None };
        assert!(plan(&e, None, &q).is_err());
        let report = plan(&e, Some(&params()), &q).unwrap();
        assert_eq!(report.optimum_method, "golden_section");
    }
}
