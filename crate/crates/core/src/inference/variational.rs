//! Structured variational E-step.
//!
//! The posterior over the `M` coupled chains is approximated by `M`
//! independent chains that keep the model's initial and transition
//! distributions and replace the observation with free log-potentials
//! `φ[t][m][k]`. The log-sum-exp normalizer of the observation model is
//! upper-bounded with `log x ≤ φ_t·x − log φ_t − 1`, whose expectation
//! factorizes across layers:
//!
//! ```text
//! A_t = Σ_Y Π_m B[t][Y][m],   B[t][Y][m] = Σ_k E[S^m_{t,k}]·exp θ[Y][m][k]
//! ```
//!
//! With `φ_t = 1/A_t` the bound is tight at the current marginals. The
//! potentials are then refit layer by layer, each layer seeing the current
//! marginals of every other layer.

use ndarray::{s, Array3, Array4, ArrayView3, Axis};

use super::chain::{self, ChainTables};
use crate::corpus::Sentence;
use crate::error::{FhmmError, Result};
use crate::model::FhmmParams;

pub const DEFAULT_MAX_ITERS: usize = 25;
pub const DEFAULT_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VariationalOptions {
    pub max_iters: usize,
    /// Convergence threshold on the max absolute change of any unary marginal.
    pub tol: f64,
}

impl Default for VariationalOptions {
    fn default() -> Self {
        VariationalOptions {
            max_iters: DEFAULT_MAX_ITERS,
            tol: DEFAULT_TOL,
        }
    }
}

impl VariationalOptions {
    fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(FhmmError::InvalidArgument("max_iters must be at least 1".into()));
        }
        if !(self.tol > 0.0) {
            return Err(FhmmError::InvalidArgument(format!(
                "tol must be positive, got {}",
                self.tol
            )));
        }
        Ok(())
    }
}

/// How the fixed-point iteration is initialized.
#[derive(Debug, Clone, Default)]
pub enum WarmStart {
    /// Potentials `φ[t][m][k] = θ[Y_t][m][k]`.
    #[default]
    ObservationLogits,
    /// Explicit `[T][M][K]` potentials.
    Potentials(Array3<f64>),
    /// `[T][M][K]` unary marginals of a previous fit. The first sweep starts
    /// from these directly, so the result never has a worse bound than the
    /// distribution they came from.
    Marginals(Array3<f64>),
}

/// Callback receiving each iterate of the fixed point.
pub type Observer<'a> = &'a mut dyn FnMut(&VariationalState, &PosteriorMarginals);

#[derive(Debug, Clone, PartialEq)]
pub struct VariationalState {
    /// `[T][M][K]` observation log-potentials.
    pub obs_potentials: Array3<f64>,
    /// Auxiliary parameter of the log bound, one per position.
    pub phi_aux: Vec<f64>,
    /// Log-normalizer of each variational chain; their sum is `log Z_Q`.
    pub layer_log_partitions: Vec<f64>,
    pub iterations_used: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorMarginals {
    /// `[T][M][K]`: `E[S^m_{t,k}]`.
    pub unary: Array3<f64>,
    /// `[T-1][M][K][K]`: `E[S^m_{t-1,j}·S^m_{t,k}]`, indexed by the earlier position.
    pub pairwise: Array4<f64>,
}

/// Products over all layers except one, via prefix and suffix products.
pub(crate) fn leave_one_out(factors: &[f64], out: &mut [f64]) {
    let mut acc = 1.0;
    for (o, &f) in out.iter_mut().zip(factors) {
        *o = acc;
        acc *= f;
    }
    acc = 1.0;
    for (o, &f) in out.iter_mut().zip(factors).rev() {
        *o *= acc;
        acc *= f;
    }
}

/// `exp θ_obs`, flattened `[V][M][K]`.
pub(crate) fn exp_observation(params: &FhmmParams) -> Vec<f64> {
    params.observation_logits().iter().map(|x| x.exp()).collect()
}

/// Writes `B[Y][m] = Σ_k μ[m][k]·exp θ[Y][m][k]` into `out` (`[V][M]`) for one position.
pub(crate) fn layer_factors(exp_obs: &[f64], mu: &[f64], layers: usize, states: usize, out: &mut [f64]) {
    let mk = layers * states;
    for (row, b) in exp_obs.chunks_exact(mk).zip(out.chunks_exact_mut(layers)) {
        for (m, bm) in b.iter_mut().enumerate() {
            let e = &row[m * states..(m + 1) * states];
            let w = &mu[m * states..(m + 1) * states];
            *bm = e.iter().zip(w).map(|(a, b)| a * b).sum();
        }
    }
}

/// `A = Σ_Y Π_m B[Y][m]`.
pub(crate) fn factor_total(factors: &[f64], layers: usize) -> f64 {
    factors.chunks_exact(layers).map(|b| b.iter().product::<f64>()).sum()
}

/// Variational inference against one fixed parameter set. Building it
/// exponentiates the observation logits once; it can then be shared across
/// threads.
#[derive(Debug)]
pub struct VariationalInference<'a> {
    params: &'a FhmmParams,
    tables: ChainTables,
    exp_obs: Vec<f64>,
}

impl<'a> VariationalInference<'a> {
    pub fn new(params: &'a FhmmParams) -> Self {
        VariationalInference {
            params,
            tables: ChainTables::new(params),
            exp_obs: exp_observation(params),
        }
    }

    pub fn params(&self) -> &FhmmParams {
        self.params
    }

    fn dims(&self) -> (usize, usize, usize) {
        (self.params.layers(), self.params.states(), self.params.vocab_size())
    }

    fn check_unary(&self, unary: &ArrayView3<f64>) -> Result<()> {
        let (m, k, _) = self.dims();
        if unary.dim().1 != m || unary.dim().2 != k {
            return Err(FhmmError::ShapeMismatch(format!(
                "marginals {:?}, expected [T][{m}][{k}]",
                unary.dim()
            )));
        }
        Ok(())
    }

    /// Optimal auxiliary parameters `φ_t = 1/A_t` for the given `[T][M][K]` marginals.
    pub fn phi_aux(&self, unary: ArrayView3<f64>) -> Result<Vec<f64>> {
        self.check_unary(&unary)?;
        let unary = unary.as_standard_layout();
        let (m, k, v) = self.dims();
        let mut factors = vec![0.0; v * m];
        let mut phi = Vec::with_capacity(unary.dim().0);
        for (t, mu) in unary.outer_iter().enumerate() {
            layer_factors(&self.exp_obs, mu.as_slice().unwrap(), m, k, &mut factors);
            let total = factor_total(&factors, m);
            if !(total > 0.0 && total.is_finite()) {
                return Err(FhmmError::DegenerateObservation { position: t });
            }
            phi.push(1.0 / total);
        }
        Ok(phi)
    }

    /// Fixed-point potentials for every layer at once, all computed from the
    /// same marginals:
    ///
    /// `φ[t][m][k] = θ[Y_t][m][k] − φ_t·Σ_Y (Π_{n≠m} B[t][Y][n])·exp θ[Y][m][k]`
    pub fn update_obs_potentials(
        &self,
        sentence: &Sentence,
        unary: ArrayView3<f64>,
        phi_aux: &[f64],
    ) -> Result<Array3<f64>> {
        self.check_unary(&unary)?;
        let (m, k, v) = self.dims();
        let t_len = sentence.len();
        if unary.dim().0 != t_len || phi_aux.len() != t_len {
            return Err(FhmmError::LengthMismatch {
                expected: t_len,
                actual: unary.dim().0.min(phi_aux.len()),
            });
        }
        sentence.validate(v)?;
        let unary = unary.as_standard_layout();
        let theta = self.params.observation_logits();
        let mut factors = vec![0.0; v * m];
        let mut loo = vec![0.0; m];
        let mut acc = vec![0.0; m * k];
        let mut out = Array3::zeros((t_len, m, k));
        for (t, mu) in unary.outer_iter().enumerate() {
            layer_factors(&self.exp_obs, mu.as_slice().unwrap(), m, k, &mut factors);
            acc.fill(0.0);
            for (b, e) in factors.chunks_exact(m).zip(self.exp_obs.chunks_exact(m * k)) {
                leave_one_out(b, &mut loo);
                for (layer, &l) in loo.iter().enumerate() {
                    let base = layer * k;
                    for s in 0..k {
                        acc[base + s] += l * e[base + s];
                    }
                }
            }
            let y = sentence.ids()[t] as usize;
            for layer in 0..m {
                for s in 0..k {
                    let value = theta[[y, layer, s]] - phi_aux[t] * acc[layer * k + s];
                    if !value.is_finite() {
                        return Err(FhmmError::VariationalDiverged { position: t });
                    }
                    out[[t, layer, s]] = value;
                }
            }
        }
        Ok(out)
    }

    /// Runs the fixed-point iteration to convergence or `max_iters` sweeps.
    pub fn fit(
        &self,
        sentence: &Sentence,
        opts: &VariationalOptions,
        warm: &WarmStart,
    ) -> Result<(VariationalState, PosteriorMarginals)> {
        self.fit_observed(sentence, opts, warm, None)
    }

    /// Like [`fit`](Self::fit), calling `observer` with a consistent
    /// snapshot after the initial pass and after every sweep. Snapshots carry
    /// the optimal `φ_t` for their marginals.
    pub fn fit_observed(
        &self,
        sentence: &Sentence,
        opts: &VariationalOptions,
        warm: &WarmStart,
        mut observer: Option<Observer<'_>>,
    ) -> Result<(VariationalState, PosteriorMarginals)> {
        opts.validate()?;
        let (m, k, v) = self.dims();
        let t_len = sentence.len();
        sentence.validate(v)?;
        let ids = sentence.ids();
        let theta = self.params.observation_logits();

        let mut potentials = Array3::<f64>::zeros((t_len, m, k));
        let mut unary = Array3::<f64>::zeros((t_len, m, k));
        let mut pairwise = Array4::<f64>::zeros((t_len.saturating_sub(1), m, k, k));
        let mut log_partitions = vec![0.0; m];

        let mut consistent = true;
        match warm {
            WarmStart::ObservationLogits => {
                for (t, &y) in ids.iter().enumerate() {
                    potentials
                        .index_axis_mut(Axis(0), t)
                        .assign(&theta.index_axis(Axis(0), y as usize));
                }
            }
            WarmStart::Potentials(p) => {
                if p.dim() != (t_len, m, k) {
                    return Err(FhmmError::ShapeMismatch(format!(
                        "warm-start potentials {:?}, expected {:?}",
                        p.dim(),
                        (t_len, m, k)
                    )));
                }
                potentials.assign(p);
            }
            WarmStart::Marginals(mu) => {
                if mu.dim() != (t_len, m, k) {
                    return Err(FhmmError::ShapeMismatch(format!(
                        "warm-start marginals {:?}, expected {:?}",
                        mu.dim(),
                        (t_len, m, k)
                    )));
                }
                unary.assign(mu);
                consistent = false;
            }
        }
        if consistent {
            for layer in 0..m {
                self.refit_layer(layer, &potentials, &mut unary, &mut pairwise, &mut log_partitions);
            }
            if let Some(obs) = observer.as_deref_mut() {
                let snap = self.snapshot(&potentials, &unary, &pairwise, &log_partitions, 0, false)?;
                obs(&snap.0, &snap.1);
            }
        }

        // B[t][Y][m] for the current marginals, flattened [T][V][M].
        let mut factors = vec![0.0; t_len * v * m];
        for t in 0..t_len {
            let mu = unary.index_axis(Axis(0), t);
            layer_factors(
                &self.exp_obs,
                mu.as_slice().unwrap(),
                m,
                k,
                &mut factors[t * v * m..(t + 1) * v * m],
            );
        }

        let mut phi = vec![0.0; t_len];
        let mut acc = vec![0.0; k];
        let mut previous = unary.clone();
        let mut iterations = 0;
        let mut converged = false;
        while iterations < opts.max_iters {
            iterations += 1;
            previous.assign(&unary);
            for (t, slot) in phi.iter_mut().enumerate() {
                let total = factor_total(&factors[t * v * m..(t + 1) * v * m], m);
                if !(total > 0.0 && total.is_finite()) {
                    return Err(FhmmError::DegenerateObservation { position: t });
                }
                *slot = 1.0 / total;
            }
            for layer in 0..m {
                for t in 0..t_len {
                    acc.fill(0.0);
                    let ft = &factors[t * v * m..(t + 1) * v * m];
                    for (b, e) in ft.chunks_exact(m).zip(self.exp_obs.chunks_exact(m * k)) {
                        let mut others = 1.0;
                        for (n, &f) in b.iter().enumerate() {
                            if n != layer {
                                others *= f;
                            }
                        }
                        let e = &e[layer * k..(layer + 1) * k];
                        for (a, &x) in acc.iter_mut().zip(e) {
                            *a += others * x;
                        }
                    }
                    let y = ids[t] as usize;
                    for s in 0..k {
                        let value = theta[[y, layer, s]] - phi[t] * acc[s];
                        if !value.is_finite() {
                            return Err(FhmmError::VariationalDiverged { position: t });
                        }
                        potentials[[t, layer, s]] = value;
                    }
                }
                self.refit_layer(layer, &potentials, &mut unary, &mut pairwise, &mut log_partitions);
                for t in 0..t_len {
                    let mu = unary.slice(s![t, layer, ..]);
                    let mu = mu.as_slice().unwrap();
                    let ft = &mut factors[t * v * m..(t + 1) * v * m];
                    for (b, e) in ft.chunks_exact_mut(m).zip(self.exp_obs.chunks_exact(m * k)) {
                        let e = &e[layer * k..(layer + 1) * k];
                        b[layer] = e.iter().zip(mu).map(|(a, b)| a * b).sum();
                    }
                }
            }
            let delta = unary
                .iter()
                .zip(previous.iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            converged = delta < opts.tol;
            if let Some(obs) = observer.as_deref_mut() {
                let snap = self.snapshot(&potentials, &unary, &pairwise, &log_partitions, iterations, converged)?;
                obs(&snap.0, &snap.1);
            }
            if converged {
                break;
            }
        }

        self.snapshot_owned(potentials, unary, pairwise, log_partitions, iterations, converged)
    }

    fn refit_layer(
        &self,
        layer: usize,
        potentials: &Array3<f64>,
        unary: &mut Array3<f64>,
        pairwise: &mut Array4<f64>,
        log_partitions: &mut [f64],
    ) {
        let post = chain::forward_backward(
            self.tables.log_init.row(layer).as_slice().unwrap(),
            self.tables.log_trans.index_axis(Axis(0), layer),
            potentials.index_axis(Axis(1), layer),
        );
        unary.index_axis_mut(Axis(1), layer).assign(&post.unary);
        pairwise.index_axis_mut(Axis(1), layer).assign(&post.pairwise);
        log_partitions[layer] = post.log_partition;
    }

    fn snapshot(
        &self,
        potentials: &Array3<f64>,
        unary: &Array3<f64>,
        pairwise: &Array4<f64>,
        log_partitions: &[f64],
        iterations: usize,
        converged: bool,
    ) -> Result<(VariationalState, PosteriorMarginals)> {
        self.snapshot_owned(
            potentials.clone(),
            unary.clone(),
            pairwise.clone(),
            log_partitions.to_vec(),
            iterations,
            converged,
        )
    }

    fn snapshot_owned(
        &self,
        potentials: Array3<f64>,
        unary: Array3<f64>,
        pairwise: Array4<f64>,
        log_partitions: Vec<f64>,
        iterations: usize,
        converged: bool,
    ) -> Result<(VariationalState, PosteriorMarginals)> {
        let phi_aux = self.phi_aux(unary.view())?;
        Ok((
            VariationalState {
                obs_potentials: potentials,
                phi_aux,
                layer_log_partitions: log_partitions,
                iterations_used: iterations,
                converged,
            },
            PosteriorMarginals { unary, pairwise },
        ))
    }

    /// Upper bound on `KL(Q‖P)` minus `log P(Y)`:
    ///
    /// `−log Z_Q + Σ E[S](φ − θ_{Y_t}) + Σ_t (φ_t·A_t − log φ_t − 1)`
    pub fn kl_surrogate(
        &self,
        sentence: &Sentence,
        state: &VariationalState,
        marginals: &PosteriorMarginals,
    ) -> Result<f64> {
        let (m, k, v) = self.dims();
        let t_len = sentence.len();
        if marginals.unary.dim() != (t_len, m, k) || state.obs_potentials.dim() != (t_len, m, k) {
            return Err(FhmmError::ShapeMismatch("state/marginals do not match sentence".into()));
        }
        if state.phi_aux.len() != t_len {
            return Err(FhmmError::LengthMismatch {
                expected: t_len,
                actual: state.phi_aux.len(),
            });
        }
        sentence.validate(v)?;
        let theta = self.params.observation_logits();
        let mut total = -state.layer_log_partitions.iter().sum::<f64>();
        let unary = marginals.unary.as_standard_layout();
        let mut factors = vec![0.0; v * m];
        for (t, &y) in sentence.ids().iter().enumerate() {
            for layer in 0..m {
                for s in 0..k {
                    total +=
                        unary[[t, layer, s]] * (state.obs_potentials[[t, layer, s]] - theta[[y as usize, layer, s]]);
                }
            }
            let mu = unary.index_axis(Axis(0), t);
            layer_factors(&self.exp_obs, mu.as_slice().unwrap(), m, k, &mut factors);
            let a = factor_total(&factors, m);
            let phi = state.phi_aux[t];
            total += phi * a - phi.ln() - 1.0;
        }
        Ok(total)
    }

    /// The surrogate lower bound `F̄` on `log P(Y)`; the negation of
    /// [`kl_surrogate`](Self::kl_surrogate).
    pub fn surrogate_bound(
        &self,
        sentence: &Sentence,
        state: &VariationalState,
        marginals: &PosteriorMarginals,
    ) -> Result<f64> {
        Ok(-self.kl_surrogate(sentence, state, marginals)?)
    }

    /// Per-layer MAP paths under the fitted chains, as `[T][M]` state indices.
    pub fn viterbi_decode(&self, state: &VariationalState) -> Vec<Vec<usize>> {
        let (t_len, m, _) = state.obs_potentials.dim();
        let mut out = vec![vec![0; m]; t_len];
        for layer in 0..m {
            let path = chain::viterbi(
                self.tables.log_init.row(layer).as_slice().unwrap(),
                self.tables.log_trans.index_axis(Axis(0), layer),
                state.obs_potentials.index_axis(Axis(1), layer),
            );
            for (row, s) in out.iter_mut().zip(path) {
                row[layer] = s;
            }
        }
        out
    }
}

pub fn compute_phi_aux(unary: ArrayView3<f64>, params: &FhmmParams) -> Result<Vec<f64>> {
    VariationalInference::new(params).phi_aux(unary)
}

pub fn update_obs_potentials(
    sentence: &Sentence,
    unary: ArrayView3<f64>,
    phi_aux: &[f64],
    params: &FhmmParams,
) -> Result<Array3<f64>> {
    VariationalInference::new(params).update_obs_potentials(sentence, unary, phi_aux)
}

pub fn fit_variational(
    sentence: &Sentence,
    params: &FhmmParams,
    opts: &VariationalOptions,
    warm: &WarmStart,
) -> Result<(VariationalState, PosteriorMarginals)> {
    VariationalInference::new(params).fit(sentence, opts, warm)
}

pub fn kl_surrogate(
    sentence: &Sentence,
    state: &VariationalState,
    marginals: &PosteriorMarginals,
    params: &FhmmParams,
) -> Result<f64> {
    VariationalInference::new(params).kl_surrogate(sentence, state, marginals)
}

pub fn viterbi_decode(state: &VariationalState, params: &FhmmParams) -> Vec<Vec<usize>> {
    VariationalInference::new(params).viterbi_decode(state)
}

/// `[T][M][K]` marginals with every entry `1/K`.
pub fn uniform_marginals(t_len: usize, layers: usize, states: usize) -> Array3<f64> {
    Array3::from_elem((t_len, layers, states), 1.0 / states as f64)
}
