use ndarray::{Array2, Array3, Axis};
use rayon::prelude::*;

use super::SufficientStats;
use crate::error::{FhmmError, Result};
use crate::inference::{factor_total, layer_factors, leave_one_out};
use crate::optim::{self, LbfgsOptions};

/// Additive smoothing applied to expected counts before normalizing.
pub const COUNT_SMOOTHING: f64 = 1e-8;

/// The gradient is summed over this many contiguous token blocks, in block
/// order, so results do not depend on the thread count.
const GRADIENT_BLOCKS: usize = 8;

fn normalize_log(counts: &[f64]) -> Vec<f64> {
    let total: f64 = counts.iter().sum::<f64>() + COUNT_SMOOTHING * counts.len() as f64;
    if !(total > 0.0) {
        let uniform = -(counts.len() as f64).ln();
        return vec![uniform; counts.len()];
    }
    counts.iter().map(|c| ((c + COUNT_SMOOTHING) / total).ln()).collect()
}

/// Closed-form initial and transition updates: normalized expected counts,
/// returned as log-probabilities.
pub fn mstep_initial_transition(stats: &SufficientStats) -> Result<(Array2<f64>, Array3<f64>)> {
    if stats.is_empty() {
        return Err(FhmmError::EmptyStats);
    }
    Ok(normalize_counts(&stats.init_counts, &stats.trans_counts))
}

/// Row-normalizes (smoothed) initial and transition counts into log-probabilities.
pub(crate) fn normalize_counts(init_counts: &Array2<f64>, trans_counts: &Array3<f64>) -> (Array2<f64>, Array3<f64>) {
    let mut init = Array2::zeros(init_counts.dim());
    for (mut dst, src) in init.outer_iter_mut().zip(init_counts.outer_iter()) {
        let row = normalize_log(&src.to_vec());
        dst.iter_mut().zip(row).for_each(|(d, v)| *d = v);
    }
    let mut trans = Array3::zeros(trans_counts.dim());
    for (mut dst, src) in trans.outer_iter_mut().zip(trans_counts.outer_iter()) {
        for (mut drow, srow) in dst.outer_iter_mut().zip(src.outer_iter()) {
            let row = normalize_log(&srow.to_vec());
            drow.iter_mut().zip(row).for_each(|(d, v)| *d = v);
        }
    }
    (init, trans)
}

/// The observation-dependent part of the surrogate bound,
///
/// `weight · Σ_t [Σ_{m,k} E[S^m_{t,k}]·θ[Y_t][m][k] − log A_t] − l2·‖θ‖²`,
///
/// with `A_t` the layer-factorized normalizer from the E-step.
#[derive(Debug, Clone, Copy)]
pub struct ObservationObjective<'a> {
    stats: &'a SufficientStats,
    vocab_size: usize,
    l2: f64,
    weight: f64,
}

impl<'a> ObservationObjective<'a> {
    pub fn new(stats: &'a SufficientStats, vocab_size: usize, l2: f64, weight: f64) -> Self {
        ObservationObjective {
            stats,
            vocab_size,
            l2,
            weight,
        }
    }

    /// Value and gradient at `theta` (flattened `[V][M][K]`).
    pub fn evaluate(&self, theta: &[f64], grad: &mut [f64]) -> Result<f64> {
        let (m, k, v) = (self.stats.layers(), self.stats.states(), self.vocab_size);
        let mk = m * k;
        if theta.len() != v * mk || grad.len() != v * mk {
            return Err(FhmmError::ShapeMismatch(format!(
                "observation logits of length {}, expected {}",
                theta.len(),
                v * mk
            )));
        }
        if let Some(&y) = self.stats.token_ids().iter().find(|&&y| y as usize >= v) {
            return Err(FhmmError::TokenOutOfRange { id: y, vocab_size: v });
        }
        let exp_obs: Vec<f64> = theta.iter().map(|t| t.exp()).collect();
        let n = self.stats.n_tokens;
        let block = n.div_ceil(GRADIENT_BLOCKS).max(1);
        let partials: Vec<Result<(f64, Vec<f64>)>> = (0..GRADIENT_BLOCKS)
            .into_par_iter()
            .map(|b| {
                let range = (b * block).min(n)..((b + 1) * block).min(n);
                let mut g = vec![0.0; v * mk];
                let mut value = 0.0;
                let mut factors = vec![0.0; v * m];
                let mut loo = vec![0.0; m];
                for i in range {
                    let mu = self.stats.token_marginal(i);
                    let y = self.stats.token_ids()[i] as usize;
                    layer_factors(&exp_obs, mu, m, k, &mut factors);
                    let a = factor_total(&factors, m);
                    if !(a > 0.0 && a.is_finite()) {
                        return Err(FhmmError::ObjectiveDiverged);
                    }
                    value += mu
                        .iter()
                        .zip(&theta[y * mk..(y + 1) * mk])
                        .map(|(p, t)| p * t)
                        .sum::<f64>();
                    value -= a.ln();
                    let inv_a = 1.0 / a;
                    for ((b_row, e_row), g_row) in factors
                        .chunks_exact(m)
                        .zip(exp_obs.chunks_exact(mk))
                        .zip(g.chunks_exact_mut(mk))
                    {
                        leave_one_out(b_row, &mut loo);
                        for (layer, &l) in loo.iter().enumerate() {
                            let scale = l * inv_a;
                            for s in layer * k..(layer + 1) * k {
                                g_row[s] -= scale * mu[s] * e_row[s];
                            }
                        }
                    }
                    for (gs, p) in g[y * mk..(y + 1) * mk].iter_mut().zip(mu) {
                        *gs += p;
                    }
                }
                Ok((value, g))
            })
            .collect();

        grad.fill(0.0);
        let mut value = 0.0;
        for part in partials {
            let (pv, pg) = part?;
            value += pv;
            grad.iter_mut().zip(&pg).for_each(|(a, b)| *a += b);
        }
        value *= self.weight;
        grad.iter_mut().for_each(|g| *g *= self.weight);
        if self.l2 > 0.0 {
            for (g, t) in grad.iter_mut().zip(theta) {
                value -= self.l2 * t * t;
                *g -= 2.0 * self.l2 * t;
            }
        }
        if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(FhmmError::ObjectiveDiverged);
        }
        Ok(value)
    }
}

/// Objective value and `[V][M][K]` gradient of the observation bound.
pub fn observation_objective_and_gradient(
    obs_logits: &Array3<f64>,
    stats: &SufficientStats,
    l2: f64,
) -> Result<(f64, Array3<f64>)> {
    let dim = obs_logits.dim();
    let theta: Vec<f64> = obs_logits.iter().copied().collect();
    let mut grad = vec![0.0; theta.len()];
    let value = ObservationObjective::new(stats, dim.0, l2, 1.0).evaluate(&theta, &mut grad)?;
    Ok((value, Array3::from_shape_vec(dim, grad).unwrap()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObservationMstepOptions {
    pub max_iters: usize,
    pub l2: f64,
    /// Multiplier on the data term, e.g. corpus size over batch size.
    pub weight: f64,
    pub gtol: f64,
}

impl Default for ObservationMstepOptions {
    fn default() -> Self {
        ObservationMstepOptions {
            max_iters: 100,
            l2: 0.0,
            weight: 1.0,
            gtol: 1e-6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ObservationMstepReport {
    pub logits: Array3<f64>,
    pub iterations: usize,
    /// Objective (to be maximized) at entry and after each accepted step.
    pub trace: Vec<f64>,
}

/// Maximizes the observation bound with L-BFGS, warm-started from `obs_logits`.
/// The returned logits never score below the entry point.
pub fn mstep_observation(
    obs_logits: &Array3<f64>,
    stats: &SufficientStats,
    opts: &ObservationMstepOptions,
) -> Result<ObservationMstepReport> {
    let dim = obs_logits.dim();
    if (dim.1, dim.2) != (stats.layers(), stats.states()) {
        return Err(FhmmError::ShapeMismatch(format!(
            "observation logits {dim:?} vs stats for M={}, K={}",
            stats.layers(),
            stats.states()
        )));
    }
    let objective = ObservationObjective::new(stats, dim.0, opts.l2, opts.weight);
    let x0: Vec<f64> = obs_logits.iter().copied().collect();
    let lbfgs = LbfgsOptions {
        max_iters: opts.max_iters,
        gtol: opts.gtol,
        ..Default::default()
    };
    let report = optim::minimize(
        |x, g| {
            let v = objective.evaluate(x, g)?;
            g.iter_mut().for_each(|gi| *gi = -*gi);
            Ok(-v)
        },
        x0,
        &lbfgs,
    )?;
    let trace: Vec<f64> = report.trace.iter().map(|v| -v).collect();
    if report.value > report.trace[0] {
        return Ok(ObservationMstepReport {
            logits: obs_logits.clone(),
            iterations: report.iterations,
            trace,
        });
    }
    Ok(ObservationMstepReport {
        logits: Array3::from_shape_vec(dim, report.x).unwrap(),
        iterations: report.iterations,
        trace,
    })
}

/// `Σ_{m,k} c·log p` over initial and transition counts: the part of the
/// expected complete-data log-likelihood that the closed-form step maximizes.
pub fn expected_prior_log_likelihood(stats: &SufficientStats, log_init: &Array2<f64>, log_trans: &Array3<f64>) -> f64 {
    let init: f64 = stats.init_counts.iter().zip(log_init.iter()).map(|(c, l)| c * l).sum();
    let trans: f64 = stats
        .trans_counts
        .axis_iter(Axis(0))
        .zip(log_trans.axis_iter(Axis(0)))
        .map(|(c, l)| c.iter().zip(l.iter()).map(|(a, b)| a * b).sum::<f64>())
        .sum();
    init + trans
}
