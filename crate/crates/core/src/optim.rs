//! Derivative-free local search with box constraints.
//!
//! Bounds are enforced by smooth reparameterization: the optimizer works in
//! an unconstrained internal space and every evaluation maps back through a
//! sine (two-sided) or square-root (one-sided) transform, so no candidate
//! ever leaves the box.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// Admissible range of one parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Bound {
    Free,
    Lower(f64),
    Interval(f64, f64),
}

impl Bound {
    pub fn contains(&self, x: f64) -> bool {
        match *self {
            Bound::Free => x.is_finite(),
            Bound::Lower(lo) => x >= lo,
            Bound::Interval(lo, hi) => (lo..=hi).contains(&x),
        }
    }

    pub fn clamp(&self, x: f64) -> f64 {
        match *self {
            Bound::Free => x,
            Bound::Lower(lo) => x.max(lo),
            Bound::Interval(lo, hi) => x.clamp(lo, hi),
        }
    }

    pub fn to_internal(&self, x: f64) -> f64 {
        match *self {
            Bound::Free => x,
            Bound::Lower(lo) => {
                let z = self.clamp(x) - lo + 1.0;
                (z * z - 1.0).sqrt()
            }
            Bound::Interval(lo, hi) => {
                let z = 2.0 * (self.clamp(x) - lo) / (hi - lo) - 1.0;
                z.clamp(-1.0, 1.0).asin()
            }
        }
    }

    pub fn to_external(&self, y: f64) -> f64 {
        match *self {
            Bound::Free => y,
            Bound::Lower(lo) => lo - 1.0 + (y * y + 1.0).sqrt(),
            Bound::Interval(lo, hi) => self.clamp(lo + (hi - lo) * (y.sin() + 1.0) / 2.0),
        }
    }
}

fn to_external(bounds: &[Bound], y: &[f64], out: &mut [f64]) {
    for ((o, b), v) in out.iter_mut().zip(bounds).zip(y) {
        *o = b.to_external(*v);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NelderMeadConfig {
    pub max_iters: usize,
    /// Stop when the simplex's objective spread falls below `tol·(1 + |f_best|)`.
    pub tol: f64,
    /// Fresh simplices built at the incumbent after convergence.
    pub max_restarts: usize,
}

impl Default for NelderMeadConfig {
    fn default() -> Self {
        Self {
            max_iters: 2000,
            tol: 1e-10,
            max_restarts: 3,
        }
    }
}

/// Outcome of one local search.
#[derive(Debug, Clone, PartialEq)]
pub struct Minimum {
    /// Best point in external (bounded) coordinates.
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Best objective after each iteration; non-increasing.
    pub trace: Vec<f64>,
}

fn sanitize(v: f64) -> f64 {
    if v.is_nan() {
        f64::INFINITY
    } else {
        v
    }
}

/// Nelder–Mead with dimension-adaptive coefficients.
///
/// Non-finite objective values are treated as `+∞`, so the simplex
/// retreats from regions where the model is undefined.
pub fn nelder_mead(mut f: impl FnMut(&[f64]) -> f64, x0: &[f64], bounds: &[Bound], config: &NelderMeadConfig) -> Minimum {
    let dim = x0.len();
    assert_eq!(dim, bounds.len(), "one bound per parameter");
    let mut ext = vec![0.0; dim];
    let mut eval = |y: &[f64], ext: &mut Vec<f64>| {
        to_external(bounds, y, ext);
        sanitize(f(ext))
    };

    let y0: Vec<f64> = x0.iter().zip(bounds).map(|(x, b)| b.to_internal(*x)).collect();
    let mut best_y = y0.clone();
    let mut best_f = eval(&y0, &mut ext);
    let mut trace = Vec::new();
    let mut iterations = 0;
    let mut converged = false;

    if dim == 0 {
        return Minimum {
            x: Vec::new(),
            value: best_f,
            iterations,
            converged: true,
            trace,
        };
    }

    let n = dim as f64;
    let (reflect, expand, contract, shrink) = if dim > 2 {
        (1.0, 1.0 + 2.0 / n, 0.75 - 1.0 / (2.0 * n), 1.0 - 1.0 / n)
    } else {
        (1.0, 2.0, 0.5, 0.5)
    };

    for restart in 0..=config.max_restarts {
        let start_f = best_f;
        let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(dim + 1);
        simplex.push((best_y.clone(), best_f));
        for i in 0..dim {
            let mut y = best_y.clone();
            let step = if restart == 0 { 0.1 } else { 0.05 } * y[i].abs().max(1.0);
            y[i] += step;
            let fy = eval(&y, &mut ext);
            simplex.push((y, fy));
        }

        let mut local_converged = false;
        while iterations < config.max_iters {
            simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
            let f_best = simplex[0].1;
            let f_worst = simplex[dim].1;
            if f_best.is_finite() && (f_worst - f_best).abs() <= config.tol * (1.0 + f_best.abs()) {
                local_converged = true;
                break;
            }
            iterations += 1;

            let mut centroid = vec![0.0; dim];
            for (y, _) in &simplex[..dim] {
                for (c, v) in centroid.iter_mut().zip(y) {
                    *c += v / n;
                }
            }
            let toward = |coef: f64, from: &[f64]| -> Vec<f64> {
                centroid.iter().zip(from).map(|(c, w)| c + coef * (c - w)).collect()
            };
            let worst = simplex[dim].0.clone();
            let yr = toward(reflect, &worst);
            let fr = eval(&yr, &mut ext);
            if fr < simplex[0].1 {
                let ye = toward(reflect * expand, &worst);
                let fe = eval(&ye, &mut ext);
                simplex[dim] = if fe < fr { (ye, fe) } else { (yr, fr) };
            } else if fr < simplex[dim - 1].1 {
                simplex[dim] = (yr, fr);
            } else {
                let (yc, fc) = if fr < simplex[dim].1 {
                    let yc = toward(reflect * contract, &worst);
                    let fc = eval(&yc, &mut ext);
                    (yc, fc)
                } else {
                    let yc = toward(-contract, &worst);
                    let fc = eval(&yc, &mut ext);
                    (yc, fc)
                };
                if fc < fr.min(simplex[dim].1) {
                    simplex[dim] = (yc, fc);
                } else {
                    let anchor = simplex[0].0.clone();
                    for vertex in simplex.iter_mut().skip(1) {
                        let y: Vec<f64> = anchor.iter().zip(&vertex.0).map(|(a, v)| a + shrink * (v - a)).collect();
                        let fy = eval(&y, &mut ext);
                        *vertex = (y, fy);
                    }
                }
            }
            let current = simplex.iter().map(|v| v.1).fold(f64::INFINITY, f64::min);
            if current < best_f {
                let idx = simplex.iter().position(|v| v.1 == current).unwrap_or(0);
                best_f = current;
                best_y = simplex[idx].0.clone();
            }
            trace.push(best_f);
        }
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        if simplex[0].1 < best_f {
            best_f = simplex[0].1;
            best_y = simplex[0].0.clone();
        }
        if iterations >= config.max_iters {
            converged = local_converged;
            break;
        }
        converged = local_converged;
        // A restart that cannot improve on the incumbent ends the search.
        if restart > 0 && (start_f - best_f).abs() <= config.tol * (1.0 + best_f.abs()) {
            break;
        }
    }

    let mut x = vec![0.0; dim];
    to_external(bounds, &best_y, &mut x);
    Minimum {
        x,
        value: best_f,
        iterations,
        converged,
        trace,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolishConfig {
    pub max_iters: usize,
    /// Huber threshold used for the reweighting; residuals inside it get full weight.
    pub huber_delta: f64,
}

/// Damped Gauss–Newton refinement of a robust least-squares objective.
///
/// `residuals` fills its output buffer and returns `false` when the model is
/// not evaluable. `objective` must be the exact objective being minimized;
/// steps are only accepted when it decreases, so the result is never worse
/// than the starting point. Residual weights follow iteratively reweighted
/// least squares for the Huber loss.
pub fn polish(
    mut residuals: impl FnMut(&[f64], &mut Vec<f64>) -> bool,
    mut objective: impl FnMut(&[f64]) -> f64,
    x0: &[f64],
    bounds: &[Bound],
    config: &PolishConfig,
) -> Minimum {
    let dim = x0.len();
    let mut ext = vec![0.0; dim];
    let mut y: Vec<f64> = x0.iter().zip(bounds).map(|(x, b)| b.to_internal(*x)).collect();
    to_external(bounds, &y, &mut ext);
    let mut f_cur = sanitize(objective(&ext));
    let mut trace = Vec::new();
    let mut r = Vec::new();
    let mut r_plus = Vec::new();
    let mut r_minus = Vec::new();
    let mut mu = 1e-3;
    let mut iterations = 0;
    let mut converged = false;

    if dim == 0 || !f_cur.is_finite() {
        return Minimum {
            x: ext,
            value: f_cur,
            iterations,
            converged: dim == 0,
            trace,
        };
    }

    while iterations < config.max_iters {
        iterations += 1;
        to_external(bounds, &y, &mut ext);
        if !residuals(&ext, &mut r) {
            break;
        }
        let m = r.len();
        let weights: Vec<f64> = r
            .iter()
            .map(|v| if v.abs() <= config.huber_delta { 1.0 } else { config.huber_delta / v.abs() })
            .collect();

        let mut jac = DMatrix::<f64>::zeros(m, dim);
        let mut ok = true;
        for j in 0..dim {
            let h = 1e-6 * y[j].abs().max(1.0);
            let mut yp = y.clone();
            yp[j] += h;
            let mut ym = y.clone();
            ym[j] -= h;
            to_external(bounds, &yp, &mut ext);
            ok &= residuals(&ext, &mut r_plus);
            to_external(bounds, &ym, &mut ext);
            ok &= residuals(&ext, &mut r_minus);
            if !ok {
                break;
            }
            for i in 0..m {
                jac[(i, j)] = (r_plus[i] - r_minus[i]) / (2.0 * h);
            }
        }
        if !ok {
            break;
        }

        let mut jtj = DMatrix::<f64>::zeros(dim, dim);
        let mut jtr = DVector::<f64>::zeros(dim);
        for i in 0..m {
            let w = weights[i];
            for a in 0..dim {
                let ja = jac[(i, a)] * w;
                jtr[a] += ja * r[i];
                for b in a..dim {
                    jtj[(a, b)] += ja * jac[(i, b)];
                }
            }
        }
        for a in 0..dim {
            for b in 0..a {
                jtj[(a, b)] = jtj[(b, a)];
            }
        }
        let diag_floor = jtj.diagonal().max() * 1e-12 + f64::MIN_POSITIVE;

        let mut improved = false;
        for _ in 0..12 {
            let mut lhs = jtj.clone();
            for a in 0..dim {
                lhs[(a, a)] += mu * jtj[(a, a)].max(diag_floor);
            }
            let step = match lhs.clone().cholesky() {
                Some(ch) => ch.solve(&(-&jtr)),
                None => match lhs.lu().solve(&(-&jtr)) {
                    Some(s) => s,
                    None => {
                        mu *= 10.0;
                        continue;
                    }
                },
            };
            let y_new: Vec<f64> = y.iter().zip(step.iter()).map(|(a, s)| a + s).collect();
            to_external(bounds, &y_new, &mut ext);
            let f_new = sanitize(objective(&ext));
            if f_new < f_cur {
                let rel_gain = (f_cur - f_new) / f_cur.abs().max(f64::MIN_POSITIVE);
                y = y_new;
                f_cur = f_new;
                mu = (mu / 3.0).max(1e-12);
                improved = true;
                if rel_gain < 1e-14 {
                    converged = true;
                }
                break;
            }
            mu *= 10.0;
        }
        trace.push(f_cur);
        if !improved || converged {
            converged = true;
            break;
        }
    }

    to_external(bounds, &y, &mut ext);
    Minimum {
        x: ext,
        value: f_cur,
        iterations,
        converged,
        trace,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rosenbrock(x: &[f64]) -> f64 {
        (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2)
    }

    #[test]
    fn finds_rosenbrock_minimum() {
        let config = NelderMeadConfig { max_iters: 5000, tol: 1e-14, max_restarts: 3 };
        let m = nelder_mead(rosenbrock, &[-1.2, 1.0], &[Bound::Free, Bound::Free], &config);
        assert!(m.value < 1e-10, "{m:?}");
        assert!((m.x[0] - 1.0).abs() < 1e-4);
    }

    #[test]
    fn respects_bounds() {
        let bounds = [Bound::Interval(2.0, 3.0), Bound::Lower(5.0)];
        let m = nelder_mead(|x| x[0] * x[0] + x[1] * x[1], &[2.5, 6.0], &bounds, &NelderMeadConfig::default());
        assert!((m.x[0] - 2.0).abs() < 1e-4 && m.x[0] >= 2.0);
        assert!((m.x[1] - 5.0).abs() < 1e-4 && m.x[1] >= 5.0);
    }

    #[test]
    fn trace_is_non_increasing() {
        let f = |x: &[f64]| (x[0] - 0.3).powi(2) + (x[1] + 2.0).abs() + (x[2] * x[0]).sin().abs();
        let m = nelder_mead(f, &[1.0, 1.0, 1.0], &[Bound::Free; 3], &NelderMeadConfig::default());
        assert!(m.trace.windows(2).all(|w| w[1] <= w[0]));
        assert!(m.trace.last().copied().unwrap_or(m.value) >= m.value);
    }

    #[test]
    fn nan_regions_are_avoided() {
        let f = |x: &[f64]| if x[0] < 0.0 { f64::NAN } else { (x[0] - 1.0).powi(2) + x[1] * x[1] };
        let m = nelder_mead(f, &[0.5, 0.5], &[Bound::Free; 2], &NelderMeadConfig::default());
        assert!((m.x[0] - 1.0).abs() < 1e-4);
    }

    #[test]
    fn polish_solves_exponential_fit() {
        let ts: Vec<f64> = (0..20).map(|i| i as f64 * 0.25).collect();
        let ys: Vec<f64> = ts.iter().map(|t| 2.0 * (-0.7 * t).exp() + 0.3).collect();
        let res = |p: &[f64], out: &mut Vec<f64>| {
            out.clear();
            out.extend(ts.iter().zip(&ys).map(|(t, y)| p[0] * (-p[1] * t).exp() + p[2] - y));
            true
        };
        let obj = |p: &[f64]| {
            let mut r = Vec::new();
            res(p, &mut r);
            r.iter().map(|v| 0.5 * v * v).sum::<f64>()
        };
        let bounds = [Bound::Free, Bound::Interval(0.0, 5.0), Bound::Lower(0.0)];
        let m = polish(res, obj, &[1.0, 1.0, 0.5], &bounds, &PolishConfig { max_iters: 200, huber_delta: 1.0 });
        assert!((m.x[0] - 2.0).abs() < 1e-8 && (m.x[1] - 0.7).abs() < 1e-8 && (m.x[2] - 0.3).abs() < 1e-8, "{m:?}");
    }

    proptest! {
        #[test]
        fn transforms_round_trip(lo in -10.0f64..10.0, width in 0.1f64..10.0, frac in 0.0f64..1.0) {
            let b = Bound::Interval(lo, lo + width);
            let x = lo + frac * width;
            prop_assert!((b.to_external(b.to_internal(x)) - x).abs() < 1e-9 * (1.0 + x.abs()));
            let l = Bound::Lower(lo);
            let x = lo + frac * 100.0;
            prop_assert!((l.to_external(l.to_internal(x)) - x).abs() < 1e-9 * (1.0 + x.abs()));
        }

        #[test]
        fn external_values_stay_in_bounds(y in -1e6f64..1e6) {
            let b = Bound::Interval(0.0, 1.0);
            prop_assert!(b.contains(b.to_external(y)));
            let l = Bound::Lower(0.5);
            prop_assert!(l.contains(l.to_external(y)));
        }
    }
}
