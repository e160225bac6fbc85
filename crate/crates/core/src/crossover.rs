//! Pretrain-from-scratch versus finetune crossover points.
//!
//! A crossover is the first token count where the scratch-trained loss
//! drops to or below the finetuned loss. Crossover compute `C = 6·N·D` is
//! then modeled as `ln C = a·N^b`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::run_data::{Language, LearningCurve};
use crate::transfer::{loss_at, CurveBank, Regime};

pub const CROSSOVER_SCHEMA_VERSION: &str = "atlas-kit.crossover/1";
const B_RANGE: (f64, f64) = (-8.0, 8.0);
const B_GRID_STEP: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CrossoverOutcome {
    Tokens(f64),
    NoCrossover,
}

/// First token count in the shared range where `pretrain − finetune ≤ 0`,
/// refined by bisection in log tokens inside the bracketing segment.
pub fn crossover_tokens(pretrain: &LearningCurve, finetune: &LearningCurve) -> Result<CrossoverOutcome> {
    let lo = pretrain.first_tokens().max(finetune.first_tokens());
    let hi = pretrain.last_tokens().min(finetune.last_tokens());
    if lo > hi {
        return Err(Error::invalid(format!(
            "curves `{}` and `{}` have disjoint token ranges",
            pretrain.regime_id, finetune.regime_id
        )));
    }
    let diff = |x: f64| -> Result<f64> { Ok(loss_at(pretrain, x)? - loss_at(finetune, x)?) };
    let mut knots: Vec<u64> = pretrain
        .points()
        .iter()
        .chain(finetune.points())
        .map(|p| p.tokens)
        .filter(|&t| t >= lo && t <= hi)
        .collect();
    knots.sort_unstable();
    knots.dedup();
    let knots: Vec<f64> = knots.into_iter().map(|t| t as f64).collect();
    if diff(knots[0])? <= 0.0 {
        return Ok(CrossoverOutcome::Tokens(knots[0]));
    }
    for w in knots.windows(2) {
        if diff(w[1])? > 0.0 {
            continue;
        }
        let log_space = w[0] > 0.0;
        let to_u = |x: f64| if log_space { x.ln() } else { x };
        let from_u = |u: f64| if log_space { u.exp() } else { u };
        let (mut a, mut b) = (to_u(w[0]), to_u(w[1]));
        for _ in 0..200 {
            let m = 0.5 * (a + b);
            if m <= a || m >= b {
                break;
            }
            if diff(from_u(m).clamp(w[0], w[1]))? > 0.0 {
                a = m;
            } else {
                b = m;
            }
        }
        return Ok(CrossoverOutcome::Tokens(from_u(b).clamp(w[0], w[1])));
    }
    Ok(CrossoverOutcome::NoCrossover)
}

/// `ln C = coeff·N^exponent`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CrossoverFit {
    pub coeff: f64,
    pub exponent: f64,
    pub residual_ss: f64,
}

impl CrossoverFit {
    pub fn log_compute_threshold(&self, n: f64) -> f64 {
        self.coeff * n.powf(self.exponent)
    }
}

fn sse_at(x: &[f64], y: &[f64], b: f64) -> (f64, f64) {
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (xi, yi) in x.iter().zip(y) {
        let p = xi.powf(b);
        sxy += p * yi;
        sxx += p * p;
    }
    let a = sxy / sxx;
    let sse = x.iter().zip(y).map(|(xi, yi)| (yi - a * xi.powf(b)).powi(2)).sum();
    (a, sse)
}

/// Least-squares fit of `ln C = a·N^b` to `(n_params, ln C)` points: grid
/// scan over b with closed-form a, golden-section refinement, then
/// Gauss–Newton on (a, b). N is scaled by its geometric mean internally.
pub fn fit_crossover_law(points: &[(f64, f64)]) -> Result<CrossoverFit> {
    if points.len() < 2 {
        return Err(Error::TooFewObservations { required: 2, got: points.len() });
    }
    if points.iter().any(|&(n, lc)| !(n > 0.0 && n.is_finite() && lc > 0.0 && lc.is_finite())) {
        return Err(Error::domain("crossover points need positive N and ln C > 0"));
    }
    let ln_g = points.iter().map(|p| p.0.ln()).sum::<f64>() / points.len() as f64;
    let x: Vec<f64> = points.iter().map(|p| (p.0.ln() - ln_g).exp()).collect();
    let y: Vec<f64> = points.iter().map(|p| p.1).collect();
    if x.iter().all(|&v| v == x[0]) {
        return Err(Error::domain("all crossover points share one model size; exponent unidentifiable"));
    }
    let steps = ((B_RANGE.1 - B_RANGE.0) / B_GRID_STEP).round() as usize;
    let (mut best_b, mut best_sse) = (0.0, f64::INFINITY);
    for i in 0..=steps {
        let b = B_RANGE.0 + i as f64 * B_GRID_STEP;
        let (_, sse) = sse_at(&x, &y, b);
        if sse < best_sse {
            (best_b, best_sse) = (b, sse);
        }
    }
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut lo, mut hi) = (best_b - B_GRID_STEP, best_b + B_GRID_STEP);
    let (mut c, mut d) = (hi - inv_phi * (hi - lo), lo + inv_phi * (hi - lo));
    let (mut fc, mut fd) = (sse_at(&x, &y, c).1, sse_at(&x, &y, d).1);
    for _ in 0..200 {
        if hi - lo < 1e-15 {
            break;
        }
        if fc < fd {
            (hi, d, fd) = (d, c, fc);
            c = hi - inv_phi * (hi - lo);
            fc = sse_at(&x, &y, c).1;
        } else {
            (lo, c, fc) = (c, d, fd);
            d = lo + inv_phi * (hi - lo);
            fd = sse_at(&x, &y, d).1;
        }
    }
    let mut b = 0.5 * (lo + hi);
    let (mut a, mut sse) = sse_at(&x, &y, b);
    for _ in 0..50 {
        let (mut jtj, mut jtr) = ([[0.0; 2]; 2], [0.0; 2]);
        for (xi, yi) in x.iter().zip(&y) {
            let p = xi.powf(b);
            let r = yi - a * p;
            let j = [p, a * p * xi.ln()];
            for u in 0..2 {
                jtr[u] += j[u] * r;
                for v in 0..2 {
                    jtj[u][v] += j[u] * j[v];
                }
            }
        }
        let det = jtj[0][0] * jtj[1][1] - jtj[0][1] * jtj[1][0];
        if !(det.abs() > 0.0) {
            break;
        }
        let da = (jtr[0] * jtj[1][1] - jtr[1] * jtj[0][1]) / det;
        let db = (jtj[0][0] * jtr[1] - jtj[1][0] * jtr[0]) / det;
        let (na, nb) = (a + da, b + db);
        let nsse: f64 = x.iter().zip(&y).map(|(xi, yi)| (yi - na * xi.powf(nb)).powi(2)).sum();
        if !(nsse < sse) {
            break;
        }
        (a, b, sse) = (na, nb, nsse);
    }
    let coeff = a * (-b * ln_g).exp();
    if !(coeff > 0.0 && coeff.is_finite()) {
        return Err(Error::FitFailed(format!("degenerate crossover fit (a = {coeff})")));
    }
    Ok(CrossoverFit {
        coeff,
        exponent: b,
        residual_ss: sse,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Pretrain,
    Finetune,
}

/// Pretrain iff `ln(budget_c) ≥ a·n^b`; the boundary goes to pretraining.
pub fn decide(fit: &CrossoverFit, n: f64, budget_c: f64) -> Result<Decision> {
    if !(n > 0.0 && budget_c > 0.0) {
        return Err(Error::domain("model size and compute budget must be positive"));
    }
    Ok(if budget_c.ln() >= fit.log_compute_threshold(n) {
        Decision::Pretrain
    } else {
        Decision::Finetune
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossoverRow {
    pub language: Language,
    pub n_params: Option<u64>,
    pub crossover_tokens: Option<f64>,
    pub c_crossover: Option<f64>,
}

/// Crossovers between `scratch:<l>[@N]` and `finetune:<l>[@N]` curves, both
/// evaluated on `l`.
pub fn crossover_report(bank: &CurveBank) -> Result<Vec<CrossoverRow>> {
    let mut rows = Vec::new();
    for (regime, scratch) in bank.iter() {
        let Regime::Scratch { lang, n } = regime else { continue };
        if &scratch.eval_language != lang {
            continue;
        }
        let Some(ft) = bank.get(&Regime::Finetune { source: lang.clone(), n: *n }, lang) else {
            continue;
        };
        let tokens = match crossover_tokens(scratch, ft)? {
            CrossoverOutcome::Tokens(t) => Some(t),
            CrossoverOutcome::NoCrossover => None,
        };
        rows.push(CrossoverRow {
            language: lang.clone(),
            n_params: *n,
            crossover_tokens: tokens,
            c_crossover: tokens.zip(*n).map(|(t, n)| 6.0 * n as f64 * t),
        });
    }
    Ok(rows)
}

pub fn write_report_csv(rows: &[CrossoverRow], sink: impl std::io::Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(["language", "crossover_tokens", "n_params", "c_crossover"])?;
    let opt = |v: Option<f64>| v.map(|v| format!("{v:?}")).unwrap_or_default();
    for r in rows {
        w.write_record([
            r.language.clone(),
            opt(r.crossover_tokens),
            r.n_params.map(|n| n.to_string()).unwrap_or_default(),
            opt(r.c_crossover),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Points usable for `fit_crossover_law`: rows with a crossover and a size.
pub fn law_points(rows: &[CrossoverRow]) -> Vec<(f64, f64)> {
    rows.iter()
        .filter_map(|r| Some((r.n_params? as f64, r.c_crossover?.ln())))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn c(id: &str, pts: &[(u64, f64)]) -> LearningCurve {
        LearningCurve::from_pairs(id, "sw", pts).unwrap()
    }

    #[test]
    fn identical_curves_cross_at_first_shared_point() {
        let b = c("finetune:sw", &[(50, 2.5), (100, 2.0), (1000, 1.5)]);
        let a2 = c("scratch:sw", &[(50, 2.5), (100, 2.0), (1000, 1.5)]);
        assert_eq!(crossover_tokens(&a2, &b).unwrap(), CrossoverOutcome::Tokens(50.0));
    }

    #[test]
    fn constructed_crossing_at_1e11() {
        // Both linear in ln tokens between knots; they meet at 1e11 exactly.
        let knots = [1e9 as u64, 1e10 as u64, 1e12 as u64, 1e13 as u64];
        let pre = c("scratch:sw", &knots.map(|t| (t, 4.0 - 0.5 * (t as f64 / 1e11).log10())));
        let ft = c("finetune:sw", &knots.map(|t| (t, 4.0 - 0.3 * (t as f64 / 1e11).log10())));
        match crossover_tokens(&pre, &ft).unwrap() {
            CrossoverOutcome::Tokens(t) => {
                assert!(t >= 1e10 && t <= 1e12);
                assert!((t / 1e11 - 1.0).abs() < 1e-9, "{t}");
            }
            o => panic!("{o:?}"),
        }
    }

    #[test]
    fn finetune_always_better_means_no_crossover() {
        let pre = c("scratch:sw", &[(10, 3.0), (100, 2.5)]);
        let ft = c("finetune:sw", &[(10, 2.0), (100, 1.5)]);
        assert_eq!(crossover_tokens(&pre, &ft).unwrap(), CrossoverOutcome::NoCrossover);
        let far = c("finetune:sw", &[(1000, 2.0), (2000, 1.5)]);
        assert!(crossover_tokens(&pre, &far).is_err());
    }

    #[test]
    fn exact_power_law_is_recovered() {
        let pts: Vec<(f64, f64)> = [1e8, 3e8, 1e9, 2e9, 8e9].iter().map(|&n| (n / 1e9, 5.0 * (n / 1e9f64).powf(1.65))).collect();
        let fit = fit_crossover_law(&pts).unwrap();
        assert!((fit.coeff - 5.0).abs() < 1e-6, "{fit:?}");
        assert!((fit.exponent - 1.65).abs() < 1e-6, "{fit:?}");
        assert!(fit.residual_ss < 1e-20);
    }

    #[test]
    fn two_points_interpolate_exactly() {
        let fit = fit_crossover_law(&[(1e9, 40.0), (4e9, 55.0)]).unwrap();
        assert!((fit.log_compute_threshold(1e9) - 40.0).abs() < 1e-9);
        assert!((fit.log_compute_threshold(4e9) - 55.0).abs() < 1e-9);
    }

    #[test]
    fn flat_data_gives_zero_exponent() {
        let fit = fit_crossover_law(&[(1e8, 48.0), (1e9, 48.0), (1e10, 48.0)]).unwrap();
        assert!(fit.exponent.abs() < 1e-6);
        assert!((fit.coeff - 48.0).abs() < 1e-6);
    }

    #[test]
    fn degenerate_points_error() {
        assert!(fit_crossover_law(&[(1e9, 40.0)]).is_err());
        assert!(fit_crossover_law(&[(1e9, 40.0), (1e9, 41.0)]).is_err());
        assert!(fit_crossover_law(&[(1e9, 40.0), (-1.0, 41.0)]).is_err());
    }

    #[test]
    fn decision_rule() {
        let n: f64 = 2e9;
        let anchor = (6.0 * n * 144e9).ln();
        let fit = CrossoverFit {
            coeff: anchor / n.powf(1.65),
            exponent: 1.65,
            residual_ss: 0.0,
        };
        assert_eq!(decide(&fit, n, 6.0 * n * 100e9).unwrap(), Decision::Finetune);
        assert_eq!(decide(&fit, n, 1.0).unwrap(), Decision::Finetune);
        assert_eq!(decide(&fit, n, 6.0 * n * 200e9).unwrap(), Decision::Pretrain);
        let exact = CrossoverFit { coeff: 10f64.ln(), exponent: 0.0, residual_ss: 0.0 };
        assert_eq!(decide(&exact, n, 10.0).unwrap(), Decision::Pretrain);
    }

    #[test]
    fn report_pairs_scratch_with_finetune() {
        let bank = CurveBank::new(vec![
            c("scratch:sw@1000", &[(10, 3.0), (100, 1.0)]),
            c("finetune:sw@1000", &[(10, 2.0), (100, 1.5)]),
            c("scratch:sw@2000", &[(10, 3.0), (100, 2.5)]),
        ])
        .unwrap();
        let rows = crossover_report(&bank).unwrap();
        assert_eq!(rows.len(), 1);
        let t = rows[0].crossover_tokens.unwrap();
        assert!(t > 10.0 && t < 100.0);
        assert_eq!(rows[0].c_crossover, Some(6.0 * 1000.0 * t));
        let mut out = Vec::new();
        write_report_csv(&rows, &mut out).unwrap();
        assert!(String::from_utf8(out).unwrap().starts_with("language,crossover_tokens,n_params,c_crossover\nsw,"));
    }

    proptest! {
        #[test]
        fn decide_is_monotone_in_budget(a in 0.1f64..100.0, b in -1.0f64..2.0, n in 1.0f64..1e3, c1 in 1.0f64..1e30, k in 1.0f64..1e6) {
            let fit = CrossoverFit { coeff: a, exponent: b, residual_ss: 0.0 };
            if decide(&fit, n, c1).unwrap() == Decision::Pretrain {
                prop_assert_eq!(decide(&fit, n, c1 * k).unwrap(), Decision::Pretrain);
            }
        }

        #[test]
        fn crossover_scales_with_token_units(scale in 2u64..1000, drop in 0.1f64..1.0) {
            let pre = c("scratch:sw", &[(10, 3.0), (100, 2.0), (1000, 2.0 - drop)]);
            let ft = c("finetune:sw", &[(10, 2.5), (100, 2.1), (1000, 1.9)]);
            let base = crossover_tokens(&pre, &ft).unwrap();
            let scaled = crossover_tokens(&pre.scale_tokens(scale).unwrap(), &ft.scale_tokens(scale).unwrap()).unwrap();
            match (base, scaled) {
                (CrossoverOutcome::Tokens(a), CrossoverOutcome::Tokens(b)) => prop_assert!((b / (a * scale as f64) - 1.0).abs() < 1e-9),
                (x, y) => prop_assert_eq!(x, y),
            }
        }
    }
}
