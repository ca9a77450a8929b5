//! Exhaustive inference on tiny instances.
//!
//! Enumerates all `(K^M)^T` latent sequences and scores each with the
//! model's own distributions. Nothing here touches the variational code, so
//! it can serve as ground truth for it.

use ndarray::{Array3, Array4, ArrayView3};

use crate::corpus::Sentence;
use crate::error::{FhmmError, Result};
use crate::math::log_add_exp;
use crate::model::{FhmmParams, StateConfig};

pub const DEFAULT_ORACLE_LIMIT: u64 = 10_000_000;

#[derive(Debug, Clone)]
pub struct OracleResult {
    /// `log P(Y_1..Y_T)`, i.e. `log Z` of the exact posterior.
    pub log_likelihood: f64,
    /// `[T][M][K]` exact posterior marginals.
    pub unary: Array3<f64>,
    /// `[T-1][M][K][K]` exact pairwise posterior marginals.
    pub pairwise: Array4<f64>,
    /// Exact MAP sequence as `[T][M]` state indices.
    pub map_path: Vec<Vec<usize>>,
}

struct Enumeration {
    layers: usize,
    states: usize,
    configs: usize,
    t_len: usize,
    /// `[t][config]` observation log-probabilities.
    obs: Vec<f64>,
    /// `[m][k]`
    init: Vec<f64>,
    /// `[m][j][k]`
    trans: Vec<f64>,
}

impl Enumeration {
    fn new(params: &FhmmParams, sentence: &Sentence, limit: u64) -> Result<Self> {
        sentence.validate(params.vocab_size())?;
        let (m, k) = (params.layers(), params.states());
        let t_len = sentence.len();
        let paths = (k as f64).powi((m * t_len) as i32);
        if paths > limit as f64 {
            return Err(FhmmError::OracleLimit { paths, limit });
        }
        let configs = k.pow(m as u32);
        let mut obs = Vec::with_capacity(t_len * configs);
        for &y in sentence.ids() {
            for c in 0..configs {
                obs.push(params.observation_log_prob(&decode_config(c, m, k), y));
            }
        }
        let init = (0..m).flat_map(|l| params.initial_log_dist(l)).collect();
        let trans = (0..m)
            .flat_map(|l| (0..k).flat_map(move |j| params.transition_log_dist(l, j)))
            .collect();
        Ok(Enumeration {
            layers: m,
            states: k,
            configs,
            t_len,
            obs,
            init,
            trans,
        })
    }

    fn state(&self, config: usize, layer: usize) -> usize {
        (config / self.states.pow((self.layers - 1 - layer) as u32)) % self.states
    }

    fn score(&self, digits: &[usize]) -> f64 {
        let (m, k) = (self.layers, self.states);
        let mut total = 0.0;
        for (t, &c) in digits.iter().enumerate() {
            total += self.obs[t * self.configs + c];
            for layer in 0..m {
                let s = self.state(c, layer);
                total += if t == 0 {
                    self.init[layer * k + s]
                } else {
                    let j = self.state(digits[t - 1], layer);
                    self.trans[(layer * k + j) * k + s]
                };
            }
        }
        total
    }

    /// Visits every sequence in lexicographic order of the flattened
    /// `(t, layer)` state list.
    fn for_each(&self, mut visit: impl FnMut(&[usize])) {
        let mut digits = vec![0usize; self.t_len];
        loop {
            visit(&digits);
            let mut pos = self.t_len;
            loop {
                if pos == 0 {
                    return;
                }
                pos -= 1;
                digits[pos] += 1;
                if digits[pos] < self.configs {
                    break;
                }
                digits[pos] = 0;
            }
        }
    }
}

/// Config index with layer 0 as the most significant base-`K` digit.
fn decode_config(c: usize, layers: usize, states: usize) -> StateConfig {
    let mut out = vec![0; layers];
    let mut rest = c;
    for slot in out.iter_mut().rev() {
        *slot = rest % states;
        rest /= states;
    }
    StateConfig(out)
}

/// Exact likelihood, marginals and MAP path by enumeration.
pub fn exact_infer(params: &FhmmParams, sentence: &Sentence, limit: u64) -> Result<OracleResult> {
    let en = Enumeration::new(params, sentence, limit)?;
    let (m, k, t_len) = (en.layers, en.states, en.t_len);

    let mut log_z = f64::NEG_INFINITY;
    let mut best = f64::NEG_INFINITY;
    let mut best_digits = vec![0; t_len];
    en.for_each(|digits| {
        let s = en.score(digits);
        log_z = log_add_exp(log_z, s);
        if s > best {
            best = s;
            best_digits.copy_from_slice(digits);
        }
    });

    let mut unary = Array3::zeros((t_len, m, k));
    let mut pairwise = Array4::zeros((t_len.saturating_sub(1), m, k, k));
    en.for_each(|digits| {
        let p = (en.score(digits) - log_z).exp();
        for (t, &c) in digits.iter().enumerate() {
            for layer in 0..m {
                let s = en.state(c, layer);
                unary[[t, layer, s]] += p;
                if t > 0 {
                    pairwise[[t - 1, layer, en.state(digits[t - 1], layer), s]] += p;
                }
            }
        }
    });

    let map_path = best_digits
        .iter()
        .map(|&c| (0..m).map(|layer| en.state(c, layer)).collect())
        .collect();
    Ok(OracleResult {
        log_likelihood: log_z,
        unary,
        pairwise,
        map_path,
    })
}

/// Exact `KL(Q‖P(S|Y))` where `Q` is the product of `M` chains that use the
/// model's initial/transition distributions and the given `[T][M][K]`
/// observation log-potentials.
pub fn exact_kl(params: &FhmmParams, sentence: &Sentence, potentials: ArrayView3<f64>, limit: u64) -> Result<f64> {
    let en = Enumeration::new(params, sentence, limit)?;
    let (m, k, t_len) = (en.layers, en.states, en.t_len);
    if potentials.dim() != (t_len, m, k) {
        return Err(FhmmError::ShapeMismatch(format!(
            "potentials {:?}, expected {:?}",
            potentials.dim(),
            (t_len, m, k)
        )));
    }
    let q_score = |digits: &[usize]| -> f64 {
        let mut total = 0.0;
        for (t, &c) in digits.iter().enumerate() {
            for layer in 0..m {
                let s = en.state(c, layer);
                total += potentials[[t, layer, s]];
                total += if t == 0 {
                    en.init[layer * k + s]
                } else {
                    en.trans[(layer * k + en.state(digits[t - 1], layer)) * k + s]
                };
            }
        }
        total
    };

    let mut log_z = f64::NEG_INFINITY;
    let mut log_zq = f64::NEG_INFINITY;
    en.for_each(|d| {
        log_z = log_add_exp(log_z, en.score(d));
        log_zq = log_add_exp(log_zq, q_score(d));
    });
    let mut kl = 0.0;
    en.for_each(|d| {
        let log_q = q_score(d) - log_zq;
        let q = log_q.exp();
        if q > 0.0 {
            kl += q * (log_q - (en.score(d) - log_z));
        }
    });
    Ok(kl)
}
