use std::fmt;
use std::time::Instant;

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::mstep::{mstep_observation, normalize_counts, ObservationMstepOptions};
use super::SufficientStats;
use crate::corpus::Sentence;
use crate::error::{FhmmError, Result};
use crate::inference::{VariationalInference, VariationalOptions, WarmStart};
use crate::model::{FhmmParams, DEFAULT_INIT_SCALE};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub layers: usize,
    pub states: usize,
    pub epochs: usize,
    pub minibatch_size: usize,
    pub estep_max_iters: usize,
    pub estep_tol: f64,
    /// L-BFGS cap for the observation step in full-batch training.
    pub mstep_max_iters: usize,
    /// L-BFGS cap for the observation step on each online mini-batch.
    pub mstep_minibatch_iters: usize,
    pub l2: f64,
    /// Stepwise EM decay `α`, with step size `η_b = (b + 2)^(−α)`.
    pub stepwise_decay: f64,
    pub seed: u64,
    pub init_scale: f64,
    /// Full-batch EM stops after this many E-steps...
    pub max_em_iters: usize,
    /// ...or once the relative bound improvement drops below this.
    pub em_rel_tol: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            layers: 5,
            states: 10,
            epochs: 5,
            minibatch_size: 1000,
            estep_max_iters: 25,
            estep_tol: 1e-6,
            mstep_max_iters: 100,
            mstep_minibatch_iters: 10,
            l2: 0.0,
            stepwise_decay: 0.6,
            seed: 0,
            init_scale: DEFAULT_INIT_SCALE,
            max_em_iters: 50,
            em_rel_tol: 1e-5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("layers", self.layers),
            ("states", self.states),
            ("epochs", self.epochs),
            ("minibatch_size", self.minibatch_size),
            ("estep_max_iters", self.estep_max_iters),
            ("max_em_iters", self.max_em_iters),
        ];
        for (name, value) in positive {
            if value == 0 {
                return Err(FhmmError::InvalidArgument(format!("{name} must be at least 1")));
            }
        }
        if !(self.estep_tol > 0.0) {
            return Err(FhmmError::InvalidArgument("estep_tol must be positive".into()));
        }
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return Err(FhmmError::InvalidArgument(format!(
                "l2 must be non-negative, got {}",
                self.l2
            )));
        }
        if !(self.stepwise_decay > 0.5 && self.stepwise_decay <= 1.0) {
            return Err(FhmmError::InvalidArgument(format!(
                "stepwise_decay must lie in (0.5, 1], got {}",
                self.stepwise_decay
            )));
        }
        if !(self.init_scale >= 0.0 && self.init_scale.is_finite()) {
            return Err(FhmmError::InvalidArgument("init_scale must be non-negative".into()));
        }
        if !(self.em_rel_tol >= 0.0) {
            return Err(FhmmError::InvalidArgument("em_rel_tol must be non-negative".into()));
        }
        Ok(())
    }

    pub fn estep_options(&self) -> VariationalOptions {
        VariationalOptions {
            max_iters: self.estep_max_iters,
            tol: self.estep_tol,
        }
    }

    fn initial_params(&self, vocab_size: usize) -> Result<FhmmParams> {
        FhmmParams::random(self.layers, self.states, vocab_size, self.seed, self.init_scale)
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct ProgressRecord {
    pub iter: usize,
    pub n_tokens: usize,
    /// Summed surrogate bound of the E-step that opened this iteration.
    pub surrogate_bound: f64,
    pub estep_iters_mean: f64,
    pub mstep_iters: usize,
    pub seconds: f64,
}

impl ProgressRecord {
    pub const HEADER: &'static str = "iter\tn_tokens\tsurrogate_bound\testep_iters_mean\tmstep_iters\tseconds";
}

impl fmt::Display for ProgressRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}\t{}\t{:.6}\t{:.3}\t{}\t{:.3}",
            self.iter, self.n_tokens, self.surrogate_bound, self.estep_iters_mean, self.mstep_iters, self.seconds
        )
    }
}

pub type Progress<'a> = Option<&'a mut dyn FnMut(&ProgressRecord)>;

#[derive(Debug, Clone)]
pub struct EstepOutput {
    pub stats: SufficientStats,
    /// Sum of per-sentence surrogate bounds.
    pub bound: f64,
    /// Fixed-point sweeps used, per sentence.
    pub iterations: Vec<usize>,
}

impl EstepOutput {
    pub fn mean_iterations(&self) -> f64 {
        if self.iterations.is_empty() {
            return 0.0;
        }
        self.iterations.iter().sum::<usize>() as f64 / self.iterations.len() as f64
    }
}

/// Runs the variational E-step on every sentence in parallel and merges the
/// results in sentence order, so the output does not depend on the thread count.
pub fn estep(
    params: &FhmmParams,
    sentences: &[Sentence],
    opts: &VariationalOptions,
    warm: Option<&[Array3<f64>]>,
) -> Result<EstepOutput> {
    if let Some(w) = warm {
        if w.len() != sentences.len() {
            return Err(FhmmError::LengthMismatch {
                expected: sentences.len(),
                actual: w.len(),
            });
        }
    }
    let engine = VariationalInference::new(params);
    let fitted: Vec<_> = sentences
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let start = match warm {
                Some(w) => WarmStart::Marginals(w[i].clone()),
                None => WarmStart::ObservationLogits,
            };
            let (state, marg) = engine.fit(s, opts, &start)?;
            let bound = engine.surrogate_bound(s, &state, &marg)?;
            Ok((marg, bound, state.iterations_used))
        })
        .collect::<Result<_>>()?;

    let mut stats = SufficientStats::new(params.layers(), params.states());
    let mut bound = 0.0;
    let mut iterations = Vec::with_capacity(sentences.len());
    for (s, (marg, b, iters)) in sentences.iter().zip(fitted) {
        stats.accumulate(&marg, s)?;
        bound += b;
        iterations.push(iters);
    }
    Ok(EstepOutput {
        stats,
        bound,
        iterations,
    })
}

/// Splits the token marginals stored in `stats` back into per-sentence arrays.
fn sentence_marginals(stats: &SufficientStats, sentences: &[Sentence]) -> Vec<Array3<f64>> {
    let (m, k) = (stats.layers(), stats.states());
    let flat = stats.token_marginals_flat();
    let mut offset = 0;
    sentences
        .iter()
        .map(|s| {
            let n = s.len() * m * k;
            let a = Array3::from_shape_vec((s.len(), m, k), flat[offset..offset + n].to_vec()).unwrap();
            offset += n;
            a
        })
        .collect()
}

/// Mean per-token surrogate bound of `params` on `sentences`.
pub fn mean_token_bound(params: &FhmmParams, sentences: &[Sentence], opts: &VariationalOptions) -> Result<f64> {
    if sentences.is_empty() {
        return Err(FhmmError::EmptyCorpus);
    }
    let out = estep(params, sentences, opts, None)?;
    Ok(out.bound / out.stats.n_tokens as f64)
}

fn check_corpus(sentences: &[Sentence], vocab_size: usize) -> Result<()> {
    if sentences.is_empty() {
        return Err(FhmmError::EmptyCorpus);
    }
    sentences.iter().try_for_each(|s| s.validate(vocab_size))
}

/// Full-batch variational EM from a seeded random initialization.
/// Returns the final parameters and the summed surrogate bound per iteration.
pub fn train_full_batch(
    sentences: &[Sentence],
    vocab_size: usize,
    config: &TrainConfig,
) -> Result<(FhmmParams, Vec<f64>)> {
    config.validate()?;
    train_full_batch_from(config.initial_params(vocab_size)?, sentences, config, None)
}

/// Full-batch EM starting from `params`.
///
/// Each E-step after the first resumes from the previous marginals, which
/// keeps the bound trace non-decreasing. The returned parameters are the
/// ones scored by the last trace entry.
pub fn train_full_batch_from(
    mut params: FhmmParams,
    sentences: &[Sentence],
    config: &TrainConfig,
    mut progress: Progress<'_>,
) -> Result<(FhmmParams, Vec<f64>)> {
    config.validate()?;
    check_dims(&params, config)?;
    check_corpus(sentences, params.vocab_size())?;
    let opts = config.estep_options();
    let mstep_opts = ObservationMstepOptions {
        max_iters: config.mstep_max_iters,
        l2: config.l2,
        ..Default::default()
    };
    let mut trace = Vec::new();
    let mut warm: Option<Vec<Array3<f64>>> = None;
    for iter in 0..config.max_em_iters {
        let clock = Instant::now();
        let out = estep(&params, sentences, &opts, warm.as_deref())?;
        let bound = out.bound;
        let converged = match trace.last() {
            Some(&prev) => (bound - prev) <= config.em_rel_tol * f64::abs(prev),
            None => false,
        };
        trace.push(bound);
        let last = converged || iter + 1 == config.max_em_iters;
        let mut mstep_iters = 0;
        if !last {
            let (init, trans) = normalize_counts(&out.stats.init_counts, &out.stats.trans_counts);
            let report = mstep_observation(params.observation_logits(), &out.stats, &mstep_opts)?;
            mstep_iters = report.iterations;
            params.set_initial_logits(init)?;
            params.set_transition_logits(trans)?;
            params.set_observation_logits(report.logits)?;
            warm = Some(sentence_marginals(&out.stats, sentences));
        }
        if let Some(cb) = progress.as_deref_mut() {
            cb(&ProgressRecord {
                iter,
                n_tokens: out.stats.n_tokens,
                surrogate_bound: bound,
                estep_iters_mean: out.mean_iterations(),
                mstep_iters,
                seconds: clock.elapsed().as_secs_f64(),
            });
        }
        if last {
            break;
        }
    }
    Ok((params, trace))
}

/// Online stepwise EM from a seeded random initialization.
pub fn train_online(sentences: &[Sentence], vocab_size: usize, config: &TrainConfig) -> Result<FhmmParams> {
    config.validate()?;
    train_online_from(config.initial_params(vocab_size)?, sentences, config, None)
}

/// Step size of stepwise EM for the `b`-th mini-batch (zero-based).
pub fn stepwise_rate(batch: usize, decay: f64) -> f64 {
    (batch as f64 + 2.0).powf(-decay)
}

/// Online stepwise EM starting from `params`.
///
/// Initial and transition counts are interpolated across mini-batches. The
/// observation step only sees the current batch, scaled to corpus size, and
/// restarts L-BFGS from scratch on every batch.
pub fn train_online_from(
    mut params: FhmmParams,
    sentences: &[Sentence],
    config: &TrainConfig,
    mut progress: Progress<'_>,
) -> Result<FhmmParams> {
    config.validate()?;
    check_dims(&params, config)?;
    check_corpus(sentences, params.vocab_size())?;
    let opts = config.estep_options();
    let (m, k) = (config.layers, config.states);
    let n_sentences = sentences.len();
    let n_tokens: usize = sentences.iter().map(Sentence::len).sum();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..n_sentences).collect();
    let mut init_stats = ndarray::Array2::<f64>::zeros((m, k));
    let mut trans_stats = Array3::<f64>::zeros((m, k, k));
    let mut step = 0;
    for _epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.minibatch_size) {
            let clock = Instant::now();
            let batch: Vec<Sentence> = chunk.iter().map(|&i| sentences[i].clone()).collect();
            let out = estep(&params, &batch, &opts, None)?;
            let eta = stepwise_rate(step, config.stepwise_decay);
            let scale = n_sentences as f64 / batch.len() as f64;
            init_stats.zip_mut_with(&out.stats.init_counts, |s, b| *s = (1.0 - eta) * *s + eta * scale * b);
            trans_stats.zip_mut_with(&out.stats.trans_counts, |s, b| *s = (1.0 - eta) * *s + eta * scale * b);
            let (init, trans) = normalize_counts(&init_stats, &trans_stats);

            let mstep_opts = ObservationMstepOptions {
                max_iters: config.mstep_minibatch_iters,
                l2: config.l2,
                weight: n_tokens as f64 / out.stats.n_tokens as f64,
                ..Default::default()
            };
            let report = mstep_observation(params.observation_logits(), &out.stats, &mstep_opts)?;
            params.set_initial_logits(init)?;
            params.set_transition_logits(trans)?;
            params.set_observation_logits(report.logits)?;

            if let Some(cb) = progress.as_deref_mut() {
                cb(&ProgressRecord {
                    iter: step,
                    n_tokens: out.stats.n_tokens,
                    surrogate_bound: out.bound,
                    estep_iters_mean: out.mean_iterations(),
                    mstep_iters: report.iterations,
                    seconds: clock.elapsed().as_secs_f64(),
                });
            }
            step += 1;
        }
    }
    Ok(params)
}

fn check_dims(params: &FhmmParams, config: &TrainConfig) -> Result<()> {
    if params.layers() != config.layers || params.states() != config.states {
        return Err(FhmmError::InvalidDimensions(format!(
            "parameters have M={}, K={} but the configuration asks for M={}, K={}",
            params.layers(),
            params.states(),
            config.layers,
            config.states
        )));
    }
    Ok(())
}
