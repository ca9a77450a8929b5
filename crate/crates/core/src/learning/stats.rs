use ndarray::{Array2, Array3, Axis};

use crate::corpus::Sentence;
use crate::error::{FhmmError, Result};
use crate::inference::PosteriorMarginals;

/// Expected counts gathered by the E-step.
///
/// Initial and transition counts are summed; the per-token unary marginals
/// are kept because the observation M-step has no closed form.
#[derive(Debug, Clone, PartialEq)]
pub struct SufficientStats {
    /// `[M][K]`: summed `E[S^m_{1,k}]`.
    pub init_counts: Array2<f64>,
    /// `[M][K][K]`: summed `E[S^m_{t-1,j}·S^m_{t,k}]`.
    pub trans_counts: Array3<f64>,
    token_ids: Vec<u32>,
    /// Flattened `[n_tokens][M][K]`.
    token_marginals: Vec<f64>,
    pub n_sentences: usize,
    pub n_tokens: usize,
}

impl SufficientStats {
    pub fn new(layers: usize, states: usize) -> Self {
        SufficientStats {
            init_counts: Array2::zeros((layers, states)),
            trans_counts: Array3::zeros((layers, states, states)),
            token_ids: Vec::new(),
            token_marginals: Vec::new(),
            n_sentences: 0,
            n_tokens: 0,
        }
    }

    pub fn layers(&self) -> usize {
        self.init_counts.dim().0
    }

    pub fn states(&self) -> usize {
        self.init_counts.dim().1
    }

    pub fn is_empty(&self) -> bool {
        self.n_sentences == 0
    }

    pub fn token_ids(&self) -> &[u32] {
        &self.token_ids
    }

    /// Unary marginals of token `i` as a flat `[M][K]` slice.
    pub fn token_marginal(&self, i: usize) -> &[f64] {
        let mk = self.layers() * self.states();
        &self.token_marginals[i * mk..(i + 1) * mk]
    }

    /// All token marginals, flattened `[n_tokens][M][K]`.
    pub fn token_marginals_flat(&self) -> &[f64] {
        &self.token_marginals
    }

    pub fn accumulate(&mut self, marginals: &PosteriorMarginals, sentence: &Sentence) -> Result<()> {
        let (m, k) = (self.layers(), self.states());
        let t_len = sentence.len();
        if marginals.unary.dim() != (t_len, m, k) {
            return Err(FhmmError::ShapeMismatch(format!(
                "unary marginals {:?}, expected {:?}",
                marginals.unary.dim(),
                (t_len, m, k)
            )));
        }
        if marginals.pairwise.dim() != (t_len - 1, m, k, k) {
            return Err(FhmmError::ShapeMismatch(format!(
                "pairwise marginals {:?}, expected {:?}",
                marginals.pairwise.dim(),
                (t_len - 1, m, k, k)
            )));
        }
        self.init_counts += &marginals.unary.index_axis(Axis(0), 0);
        for step in marginals.pairwise.outer_iter() {
            self.trans_counts += &step;
        }
        self.token_ids.extend_from_slice(sentence.ids());
        self.token_marginals.extend(marginals.unary.iter().copied());
        self.n_sentences += 1;
        self.n_tokens += t_len;
        Ok(())
    }

    /// Adds `other` into `self`. Counts add elementwise; token records append.
    pub fn merge(&mut self, other: &SufficientStats) -> Result<()> {
        if other.init_counts.dim() != self.init_counts.dim() {
            return Err(FhmmError::ShapeMismatch(format!(
                "merging stats for {:?} into {:?}",
                other.init_counts.dim(),
                self.init_counts.dim()
            )));
        }
        self.init_counts += &other.init_counts;
        self.trans_counts += &other.trans_counts;
        self.token_ids.extend_from_slice(&other.token_ids);
        self.token_marginals.extend_from_slice(&other.token_marginals);
        self.n_sentences += other.n_sentences;
        self.n_tokens += other.n_tokens;
        Ok(())
    }
}
