//! Parameters of a discrete-observation factorial HMM and the exact
//! probabilities they define.
//!
//! A model has `M` independent latent chains ("layers") with `K` states each.
//! Every distribution is log-linear and parameters are stored as raw logits:
//!
//! * initial: `P(S¹_m = k) ∝ exp θ_init[m][k]`
//! * transition: `P(S_t^m = k | S_{t-1}^m = j) ∝ exp θ_trans[m][j][k]`
//! * observation: `P(Y_t = y | S_t) ∝ exp Σ_m θ_obs[y][m][k_m]`
//!
//! The observation distribution couples all layers through its normalizer,
//! which sums over the whole vocabulary.

mod io;

pub use io::{ParamsJson, MODEL_FORMAT_VERSION, MODEL_MAGIC};

use ndarray::{Array2, Array3};
use rand::distributions::{Distribution, Uniform, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::Sentence;
use crate::error::{FhmmError, Result};
use crate::math::{log_softmax, log_sum_exp};

pub const DEFAULT_INIT_SCALE: f64 = 0.1;

/// Joint latent state at one position: the active state index of each layer.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct StateConfig(pub Vec<usize>);

impl StateConfig {
    pub fn states(&self) -> &[usize] {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FhmmParams {
    initial_logits: Array2<f64>,
    transition_logits: Array3<f64>,
    observation_logits: Array3<f64>,
}

impl FhmmParams {
    /// Assembles parameters from logit tensors shaped `[M][K]`, `[M][K][K]`
    /// and `[V][M][K]`.
    pub fn from_parts(
        initial_logits: Array2<f64>,
        transition_logits: Array3<f64>,
        observation_logits: Array3<f64>,
    ) -> Result<Self> {
        let (m, k) = initial_logits.dim();
        let (v, om, ok) = observation_logits.dim();
        if m == 0 || k == 0 || v == 0 {
            return Err(FhmmError::InvalidDimensions(format!("M={m}, K={k}, V={v}")));
        }
        if transition_logits.dim() != (m, k, k) {
            return Err(FhmmError::ShapeMismatch(format!(
                "transition logits {:?}, expected {:?}",
                transition_logits.dim(),
                (m, k, k)
            )));
        }
        if (om, ok) != (m, k) {
            return Err(FhmmError::ShapeMismatch(format!(
                "observation logits {:?}, expected {:?}",
                observation_logits.dim(),
                (v, m, k)
            )));
        }
        let all_finite = initial_logits
            .iter()
            .chain(transition_logits.iter())
            .chain(observation_logits.iter())
            .all(|x| x.is_finite());
        if !all_finite {
            return Err(FhmmError::InvalidArgument("non-finite logit".into()));
        }
        Ok(FhmmParams {
            initial_logits,
            transition_logits,
            observation_logits,
        })
    }

    /// Logits drawn i.i.d. from `U[-scale, scale]` with a seeded ChaCha generator.
    pub fn random(layers: usize, states: usize, vocab_size: usize, seed: u64, scale: f64) -> Result<Self> {
        if layers == 0 || states == 0 || vocab_size == 0 {
            return Err(FhmmError::InvalidDimensions(format!(
                "M={layers}, K={states}, V={vocab_size}"
            )));
        }
        if !(scale >= 0.0 && scale.is_finite()) {
            return Err(FhmmError::InvalidArgument(format!("init scale {scale}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |n: usize| -> Vec<f64> {
            if scale == 0.0 {
                vec![0.0; n]
            } else {
                let u = Uniform::new_inclusive(-scale, scale);
                (0..n).map(|_| u.sample(&mut rng)).collect()
            }
        };
        let init = Array2::from_shape_vec((layers, states), draw(layers * states)).unwrap();
        let trans = Array3::from_shape_vec((layers, states, states), draw(layers * states * states)).unwrap();
        let obs = Array3::from_shape_vec((vocab_size, layers, states), draw(vocab_size * layers * states)).unwrap();
        Self::from_parts(init, trans, obs)
    }

    /// All-zero logits: every distribution uniform.
    pub fn uniform(layers: usize, states: usize, vocab_size: usize) -> Result<Self> {
        Self::random(layers, states, vocab_size, 0, 0.0)
    }

    pub fn layers(&self) -> usize {
        self.initial_logits.dim().0
    }

    pub fn states(&self) -> usize {
        self.initial_logits.dim().1
    }

    pub fn vocab_size(&self) -> usize {
        self.observation_logits.dim().0
    }

    pub fn initial_logits(&self) -> &Array2<f64> {
        &self.initial_logits
    }

    pub fn transition_logits(&self) -> &Array3<f64> {
        &self.transition_logits
    }

    pub fn observation_logits(&self) -> &Array3<f64> {
        &self.observation_logits
    }

    pub fn set_initial_logits(&mut self, logits: Array2<f64>) -> Result<()> {
        check_shape("initial", logits.dim(), self.initial_logits.dim())?;
        self.initial_logits = logits;
        Ok(())
    }

    pub fn set_transition_logits(&mut self, logits: Array3<f64>) -> Result<()> {
        check_shape("transition", logits.dim(), self.transition_logits.dim())?;
        self.transition_logits = logits;
        Ok(())
    }

    pub fn set_observation_logits(&mut self, logits: Array3<f64>) -> Result<()> {
        check_shape("observation", logits.dim(), self.observation_logits.dim())?;
        self.observation_logits = logits;
        Ok(())
    }

    pub fn initial_log_dist(&self, layer: usize) -> Vec<f64> {
        log_softmax(self.initial_logits.row(layer).as_slice().unwrap())
    }

    pub fn transition_log_dist(&self, layer: usize, prev: usize) -> Vec<f64> {
        let row = self.transition_logits.slice(ndarray::s![layer, prev, ..]);
        log_softmax(row.as_slice().unwrap())
    }

    /// `[K][K]` log transition matrix of one layer, rows indexed by the previous state.
    pub fn transition_log_matrix(&self, layer: usize) -> Array2<f64> {
        let k = self.states();
        let mut out = Array2::zeros((k, k));
        for j in 0..k {
            for (dst, src) in out.row_mut(j).iter_mut().zip(self.transition_log_dist(layer, j)) {
                *dst = src;
            }
        }
        out
    }

    /// Unnormalized observation score `Σ_m θ[y][m][k_m]`.
    fn observation_score(&self, config: &StateConfig, y: usize) -> f64 {
        config
            .states()
            .iter()
            .enumerate()
            .map(|(m, &k)| self.observation_logits[[y, m, k]])
            .sum()
    }

    fn observation_scores(&self, config: &StateConfig) -> Vec<f64> {
        (0..self.vocab_size())
            .map(|y| self.observation_score(config, y))
            .collect()
    }

    /// `log P(Y = y | S = config)`. Costs `O(V·M)`.
    pub fn observation_log_prob(&self, config: &StateConfig, y: u32) -> f64 {
        let scores = self.observation_scores(config);
        scores[y as usize] - log_sum_exp(&scores)
    }

    fn check_config(&self, config: &StateConfig) -> Result<()> {
        if config.0.len() != self.layers() {
            return Err(FhmmError::LengthMismatch {
                expected: self.layers(),
                actual: config.0.len(),
            });
        }
        if let Some(&k) = config.0.iter().find(|&&k| k >= self.states()) {
            return Err(FhmmError::InvalidArgument(format!(
                "state {k} out of range for K={}",
                self.states()
            )));
        }
        Ok(())
    }

    /// `log P({S_t}, {Y_t})` for a full latent assignment.
    pub fn joint_log_prob(&self, configs: &[StateConfig], sentence: &Sentence) -> Result<f64> {
        if configs.len() != sentence.len() {
            return Err(FhmmError::LengthMismatch {
                expected: sentence.len(),
                actual: configs.len(),
            });
        }
        sentence.validate(self.vocab_size())?;
        let mut total = 0.0;
        for (t, (config, &y)) in configs.iter().zip(sentence.ids()).enumerate() {
            self.check_config(config)?;
            for (m, &k) in config.states().iter().enumerate() {
                total += if t == 0 {
                    self.initial_log_dist(m)[k]
                } else {
                    self.transition_log_dist(m, configs[t - 1].0[m])[k]
                };
            }
            total += self.observation_log_prob(config, y);
        }
        Ok(total)
    }

    /// Draws a latent path and a sentence of the given length.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, len: usize) -> Result<(Vec<StateConfig>, Sentence)> {
        if len == 0 {
            return Err(FhmmError::EmptySentence);
        }
        let probs = |logp: Vec<f64>| logp.into_iter().map(f64::exp).collect::<Vec<_>>();
        let mut configs: Vec<StateConfig> = Vec::with_capacity(len);
        let mut ids = Vec::with_capacity(len);
        for t in 0..len {
            let states = (0..self.layers())
                .map(|m| {
                    let p = if t == 0 {
                        probs(self.initial_log_dist(m))
                    } else {
                        probs(self.transition_log_dist(m, configs[t - 1].0[m]))
                    };
                    WeightedIndex::new(&p).unwrap().sample(rng)
                })
                .collect();
            let config = StateConfig(states);
            let emit = probs(log_softmax(&self.observation_scores(&config)));
            ids.push(WeightedIndex::new(&emit).unwrap().sample(rng) as u32);
            configs.push(config);
        }
        Ok((configs, Sentence::new(ids)?))
    }
}

fn check_shape<D: std::fmt::Debug + PartialEq>(what: &str, got: D, expected: D) -> Result<()> {
    if got != expected {
        return Err(FhmmError::ShapeMismatch(format!(
            "{what} logits {got:?}, expected {expected:?}"
        )));
    }
    Ok(())
}
