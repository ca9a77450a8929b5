//! Limited-memory BFGS with a strong-Wolfe line search.
//!
//! Minimizes; callers maximizing an objective pass its negation.

use crate::error::{FhmmError, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LbfgsOptions {
    pub max_iters: usize,
    /// Number of correction pairs kept.
    pub memory: usize,
    /// Stop when the max-norm of the gradient falls below this.
    pub gtol: f64,
    /// Stop when the relative decrease of the objective falls below this.
    pub ftol: f64,
    pub max_line_search_evals: usize,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        LbfgsOptions {
            max_iters: 100,
            memory: 10,
            gtol: 1e-6,
            ftol: 1e-12,
            max_line_search_evals: 25,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    GradientTolerance,
    FunctionTolerance,
    MaxIterations,
    LineSearchFailed,
}

#[derive(Debug, Clone)]
pub struct LbfgsReport {
    pub x: Vec<f64>,
    pub value: f64,
    pub gradient: Vec<f64>,
    pub iterations: usize,
    pub evaluations: usize,
    /// Objective at the start point and after every accepted step.
    pub trace: Vec<f64>,
    pub termination: Termination,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn max_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, x| m.max(x.abs()))
}

struct Trial {
    alpha: f64,
    value: f64,
    slope: f64,
    x: Vec<f64>,
    grad: Vec<f64>,
}

/// Minimizes `f`, which returns the objective and writes its gradient into
/// the second argument.
pub fn minimize<F>(mut f: F, x0: Vec<f64>, opts: &LbfgsOptions) -> Result<LbfgsReport>
where
    F: FnMut(&[f64], &mut [f64]) -> Result<f64>,
{
    let n = x0.len();
    let mut x = x0;
    let mut grad = vec![0.0; n];
    let mut value = f(&x, &mut grad)?;
    let mut evaluations = 1;
    if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(FhmmError::ObjectiveDiverged);
    }
    let mut trace = vec![value];
    let mut s_hist: Vec<Vec<f64>> = Vec::new();
    let mut y_hist: Vec<Vec<f64>> = Vec::new();
    let mut rho_hist: Vec<f64> = Vec::new();
    let mut iterations = 0;

    let termination = loop {
        if max_norm(&grad) <= opts.gtol {
            break Termination::GradientTolerance;
        }
        if iterations >= opts.max_iters {
            break Termination::MaxIterations;
        }

        // Two-loop recursion for d = -H g.
        let mut d: Vec<f64> = grad.iter().map(|g| -g).collect();
        let mut alphas = vec![0.0; s_hist.len()];
        for i in (0..s_hist.len()).rev() {
            alphas[i] = rho_hist[i] * dot(&s_hist[i], &d);
            for (dj, yj) in d.iter_mut().zip(&y_hist[i]) {
                *dj -= alphas[i] * yj;
            }
        }
        if let (Some(s), Some(y)) = (s_hist.last(), y_hist.last()) {
            let gamma = dot(s, y) / dot(y, y);
            d.iter_mut().for_each(|v| *v *= gamma);
        }
        for i in 0..s_hist.len() {
            let beta = rho_hist[i] * dot(&y_hist[i], &d);
            for (dj, sj) in d.iter_mut().zip(&s_hist[i]) {
                *dj += (alphas[i] - beta) * sj;
            }
        }
        let mut slope = dot(&d, &grad);
        if !(slope < 0.0) {
            s_hist.clear();
            y_hist.clear();
            rho_hist.clear();
            d = grad.iter().map(|g| -g).collect();
            slope = dot(&d, &grad);
        }
        let initial_step = if s_hist.is_empty() {
            (1.0 / max_norm(&d)).min(1.0)
        } else {
            1.0
        };

        let accepted = line_search(&mut f, &x, value, &d, slope, initial_step, opts, &mut evaluations)?;
        let Some(trial) = accepted else {
            break Termination::LineSearchFailed;
        };
        iterations += 1;

        let s: Vec<f64> = trial.x.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = trial.grad.iter().zip(&grad).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        let previous = value;
        x = trial.x;
        grad = trial.grad;
        value = trial.value;
        trace.push(value);
        if sy > 1e-12 * dot(&y, &y).sqrt() * dot(&s, &s).sqrt() {
            if s_hist.len() == opts.memory {
                s_hist.remove(0);
                y_hist.remove(0);
                rho_hist.remove(0);
            }
            s_hist.push(s);
            y_hist.push(y);
            rho_hist.push(1.0 / sy);
        }
        if (previous - value).abs() <= opts.ftol * previous.abs().max(value.abs()).max(1.0) {
            break Termination::FunctionTolerance;
        }
    };

    Ok(LbfgsReport {
        x,
        value,
        gradient: grad,
        iterations,
        evaluations,
        trace,
        termination,
    })
}

#[allow(clippy::too_many_arguments)]
fn line_search<F>(
    f: &mut F,
    x: &[f64],
    value0: f64,
    d: &[f64],
    slope0: f64,
    initial_step: f64,
    opts: &LbfgsOptions,
    evaluations: &mut usize,
) -> Result<Option<Trial>>
where
    F: FnMut(&[f64], &mut [f64]) -> Result<f64>,
{
    const C1: f64 = 1e-4;
    const C2: f64 = 0.9;
    let mut eval = |alpha: f64, evaluations: &mut usize| -> Result<Trial> {
        let xt: Vec<f64> = x.iter().zip(d).map(|(a, b)| a + alpha * b).collect();
        let mut gt = vec![0.0; x.len()];
        let mut v = f(&xt, &mut gt)?;
        *evaluations += 1;
        if !v.is_finite() || gt.iter().any(|g| !g.is_finite()) {
            v = f64::INFINITY;
        }
        Ok(Trial {
            alpha,
            value: v,
            slope: dot(&gt, d),
            x: xt,
            grad: gt,
        })
    };
    let armijo = |t: &Trial| t.value <= value0 + C1 * t.alpha * slope0;
    let curvature = |t: &Trial| t.slope.abs() <= -C2 * slope0;

    let origin = Trial {
        alpha: 0.0,
        value: value0,
        slope: slope0,
        x: x.to_vec(),
        grad: Vec::new(),
    };
    let mut prev = origin;
    let mut alpha = initial_step;
    let mut budget = opts.max_line_search_evals;
    let (mut lo, mut hi);
    loop {
        if budget == 0 {
            return Ok(None);
        }
        budget -= 1;
        let t = eval(alpha, evaluations)?;
        if !armijo(&t) || (prev.alpha > 0.0 && t.value >= prev.value) {
            lo = prev;
            hi = t;
            break;
        }
        if curvature(&t) {
            return Ok(Some(t));
        }
        if t.slope >= 0.0 {
            lo = t;
            hi = prev;
            break;
        }
        alpha = t.alpha * 2.0;
        prev = t;
    }

    while budget > 0 {
        budget -= 1;
        let (a, b) = (lo.alpha.min(hi.alpha), lo.alpha.max(hi.alpha));
        let width = b - a;
        let mut alpha = cubic_minimizer(&lo, &hi).unwrap_or(0.5 * (a + b));
        if !(alpha > a + 0.1 * width && alpha < b - 0.1 * width) {
            alpha = 0.5 * (a + b);
        }
        if width <= f64::EPSILON * b.max(1.0) {
            break;
        }
        let t = eval(alpha, evaluations)?;
        if !armijo(&t) || t.value >= lo.value {
            hi = t;
        } else {
            if curvature(&t) {
                return Ok(Some(t));
            }
            if t.slope * (hi.alpha - lo.alpha) >= 0.0 {
                hi = lo;
            }
            lo = t;
        }
    }
    // Accept the best sufficient-decrease point seen, if any.
    if lo.alpha > 0.0 && lo.value < value0 {
        Ok(Some(lo))
    } else {
        Ok(None)
    }
}

/// Minimizer of the cubic interpolating value and slope at two points.
fn cubic_minimizer(p: &Trial, q: &Trial) -> Option<f64> {
    if !p.value.is_finite() || !q.value.is_finite() {
        return None;
    }
    let d1 = p.slope + q.slope - 3.0 * (p.value - q.value) / (p.alpha - q.alpha);
    let disc = d1 * d1 - p.slope * q.slope;
    if disc < 0.0 {
        return None;
    }
    let d2 = (q.alpha - p.alpha).signum() * disc.sqrt();
    let alpha = q.alpha - (q.alpha - p.alpha) * (q.slope + d2 - d1) / (q.slope - p.slope + 2.0 * d2);
    alpha.is_finite().then_some(alpha)
}
