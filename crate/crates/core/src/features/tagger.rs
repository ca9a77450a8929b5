use std::collections::HashMap;
use std::fmt;

use super::tagged::TaggedCorpus;
use crate::error::{FhmmError, Result};
use crate::math::{argmax, log_sum_exp};
use crate::optim::{self, LbfgsOptions};

/// Per-sentence, per-token dense representation vectors.
pub type DenseReps = [Vec<Vec<f64>>];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaggerOptions {
    /// L2 penalty `reg/2·‖W‖²` on every weight, bias included.
    pub reg: f64,
    pub max_iters: usize,
    /// Training stops once the gradient max-norm falls below this.
    pub gtol: f64,
    /// Representations of tokens within this distance are appended.
    pub window: usize,
}

impl Default for TaggerOptions {
    fn default() -> Self {
        TaggerOptions {
            reg: 1e-3,
            max_iters: 500,
            gtol: 1e-4,
            window: 2,
        }
    }
}

/// Multinomial logistic regression over bias, word identity and a window of
/// token representations.
#[derive(Debug, Clone)]
pub struct Tagger {
    n_labels: usize,
    word_index: HashMap<String, usize>,
    rep_dim: usize,
    window: usize,
    /// `[n_labels][n_features]`, row-major.
    weights: Vec<f64>,
}

struct TokenFeatures {
    word: Option<usize>,
    dense: Vec<f64>,
}

impl Tagger {
    pub fn n_labels(&self) -> usize {
        self.n_labels
    }

    pub fn n_features(&self) -> usize {
        1 + self.word_index.len() + (2 * self.window + 1) * self.rep_dim
    }

    fn dense_offset(&self) -> usize {
        1 + self.word_index.len()
    }

    fn token_features(&self, words: &[String], reps: Option<&[Vec<f64>]>) -> Result<Vec<TokenFeatures>> {
        if let Some(r) = reps {
            if r.len() != words.len() {
                return Err(FhmmError::LengthMismatch {
                    expected: words.len(),
                    actual: r.len(),
                });
            }
            if let Some(bad) = r.iter().find(|v| v.len() != self.rep_dim) {
                return Err(FhmmError::ShapeMismatch(format!(
                    "representation of length {}, expected {}",
                    bad.len(),
                    self.rep_dim
                )));
            }
        } else if self.rep_dim > 0 {
            return Err(FhmmError::InvalidArgument(
                "tagger expects token representations".into(),
            ));
        }
        let t_len = words.len() as isize;
        Ok(words
            .iter()
            .enumerate()
            .map(|(t, w)| {
                let mut dense = vec![0.0; (2 * self.window + 1) * self.rep_dim];
                if let Some(r) = reps {
                    for (slot, offset) in (-(self.window as isize)..=self.window as isize).enumerate() {
                        let u = t as isize + offset;
                        if (0..t_len).contains(&u) {
                            dense[slot * self.rep_dim..(slot + 1) * self.rep_dim].copy_from_slice(&r[u as usize]);
                        }
                    }
                }
                TokenFeatures {
                    word: self.word_index.get(w).copied(),
                    dense,
                }
            })
            .collect())
    }

    fn scores(&self, weights: &[f64], x: &TokenFeatures, out: &mut [f64]) {
        let f = self.n_features();
        let off = self.dense_offset();
        for (c, o) in out.iter_mut().enumerate() {
            let w = &weights[c * f..(c + 1) * f];
            let mut s = w[0];
            if let Some(i) = x.word {
                s += w[1 + i];
            }
            s += w[off..].iter().zip(&x.dense).map(|(a, b)| a * b).sum::<f64>();
            *o = s;
        }
    }

    pub fn predict(&self, words: &[String], reps: Option<&[Vec<f64>]>) -> Result<Vec<u32>> {
        let feats = self.token_features(words, reps)?;
        let mut scores = vec![0.0; self.n_labels];
        Ok(feats
            .iter()
            .map(|x| {
                self.scores(&self.weights, x, &mut scores);
                argmax(&scores) as u32
            })
            .collect())
    }

    /// Label probabilities for every token.
    pub fn predict_proba(&self, words: &[String], reps: Option<&[Vec<f64>]>) -> Result<Vec<Vec<f64>>> {
        let feats = self.token_features(words, reps)?;
        let mut scores = vec![0.0; self.n_labels];
        Ok(feats
            .iter()
            .map(|x| {
                self.scores(&self.weights, x, &mut scores);
                let z = log_sum_exp(&scores);
                scores.iter().map(|s| (s - z).exp()).collect()
            })
            .collect())
    }

    pub fn predict_corpus(&self, corpus: &TaggedCorpus, reps: Option<&DenseReps>) -> Result<Vec<Vec<u32>>> {
        check_reps(corpus, reps)?;
        corpus
            .sentences
            .iter()
            .enumerate()
            .map(|(i, s)| self.predict(&s.words, reps.map(|r| r[i].as_slice())))
            .collect()
    }
}

fn check_reps(corpus: &TaggedCorpus, reps: Option<&DenseReps>) -> Result<()> {
    if let Some(r) = reps {
        if r.len() != corpus.sentences.len() {
            return Err(FhmmError::LengthMismatch {
                expected: corpus.sentences.len(),
                actual: r.len(),
            });
        }
    }
    Ok(())
}

/// Fits the tagger. Word identity features cover the training words; pass
/// `reps` to append the representation window.
pub fn train_tagger(train: &TaggedCorpus, reps: Option<&DenseReps>, opts: &TaggerOptions) -> Result<Tagger> {
    check_reps(train, reps)?;
    if train.n_tokens() == 0 {
        return Err(FhmmError::EmptyCorpus);
    }
    if !(opts.reg >= 0.0) {
        return Err(FhmmError::InvalidArgument(
            "tagger regularization must be non-negative".into(),
        ));
    }
    let first = train.sentences.iter().flat_map(|s| &s.labels).next().copied();
    if train
        .sentences
        .iter()
        .flat_map(|s| &s.labels)
        .all(|&l| Some(l) == first)
    {
        return Err(FhmmError::DegenerateData(
            "tagger training data has a single label".into(),
        ));
    }
    let n_labels = train
        .sentences
        .iter()
        .flat_map(|s| &s.labels)
        .map(|&l| l as usize + 1)
        .max()
        .unwrap_or(0)
        .max(train.labels.len());

    let mut word_index = HashMap::new();
    for w in train.sentences.iter().flat_map(|s| &s.words) {
        let next = word_index.len();
        word_index.entry(w.clone()).or_insert(next);
    }
    let rep_dim = reps.and_then(|r| r.iter().flatten().next()).map_or(0, Vec::len);
    let mut tagger = Tagger {
        n_labels,
        word_index,
        rep_dim,
        window: opts.window,
        weights: Vec::new(),
    };

    let mut data: Vec<(TokenFeatures, usize)> = Vec::with_capacity(train.n_tokens());
    for (i, s) in train.sentences.iter().enumerate() {
        let feats = tagger.token_features(&s.words, reps.map(|r| r[i].as_slice()))?;
        data.extend(feats.into_iter().zip(s.labels.iter().map(|&l| l as usize)));
    }
    let n = data.len() as f64;
    let f = tagger.n_features();
    let off = tagger.dense_offset();
    let objective = |w: &[f64], g: &mut [f64]| -> Result<f64> {
        g.fill(0.0);
        let mut value = 0.0;
        let mut scores = vec![0.0; n_labels];
        for (x, y) in &data {
            tagger.scores(w, x, &mut scores);
            let z = log_sum_exp(&scores);
            value += z - scores[*y];
            for (c, &s) in scores.iter().enumerate() {
                let coef = ((s - z).exp() - if c == *y { 1.0 } else { 0.0 }) / n;
                let gc = &mut g[c * f..(c + 1) * f];
                gc[0] += coef;
                if let Some(i) = x.word {
                    gc[1 + i] += coef;
                }
                for (gi, xi) in gc[off..].iter_mut().zip(&x.dense) {
                    *gi += coef * xi;
                }
            }
        }
        value /= n;
        for (gi, wi) in g.iter_mut().zip(w) {
            value += 0.5 * opts.reg * wi * wi;
            *gi += opts.reg * wi;
        }
        Ok(value)
    };
    let lbfgs = LbfgsOptions {
        max_iters: opts.max_iters,
        gtol: opts.gtol,
        ftol: 0.0,
        ..Default::default()
    };
    let report = optim::minimize(objective, vec![0.0; n_labels * f], &lbfgs)?;
    tagger.weights = report.x;
    Ok(tagger)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ErrorCount {
    pub errors: usize,
    pub total: usize,
}

impl ErrorCount {
    /// Error rate, or `None` when there were no tokens.
    pub fn rate(&self) -> Option<f64> {
        (self.total > 0).then(|| self.errors as f64 / self.total as f64)
    }

    fn add(&mut self, wrong: bool) {
        self.total += 1;
        self.errors += wrong as usize;
    }
}

/// Error rates over all tokens, tokens unseen in tagger training (OOV), and
/// tokens seen at most twice (rare, OOV included).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TaggerReport {
    pub all: ErrorCount,
    pub oov: ErrorCount,
    pub rare: ErrorCount,
}

/// Largest training count for which a word still counts as rare.
pub const RARE_MAX_COUNT: usize = 2;

impl TaggerReport {
    pub const HEADER: &'static str = "All\tOOV\tRare";
}

fn percent(c: ErrorCount) -> String {
    c.rate()
        .map_or_else(|| "-".to_string(), |r| format!("{:.2}%", 100.0 * r))
}

impl fmt::Display for TaggerReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}\t{}\t{}",
            percent(self.all),
            percent(self.oov),
            percent(self.rare)
        )
    }
}

/// Scores `predicted` against the gold labels of `test`.
pub fn error_report(
    test: &TaggedCorpus,
    predicted: &[Vec<u32>],
    train_counts: &HashMap<String, usize>,
) -> Result<TaggerReport> {
    if predicted.len() != test.sentences.len() {
        return Err(FhmmError::LengthMismatch {
            expected: test.sentences.len(),
            actual: predicted.len(),
        });
    }
    let mut report = TaggerReport::default();
    for (s, pred) in test.sentences.iter().zip(predicted) {
        if pred.len() != s.len() {
            return Err(FhmmError::LengthMismatch {
                expected: s.len(),
                actual: pred.len(),
            });
        }
        for ((w, &gold), &p) in s.words.iter().zip(&s.labels).zip(pred) {
            let wrong = gold != p;
            let count = train_counts.get(w).copied().unwrap_or(0);
            report.all.add(wrong);
            if count == 0 {
                report.oov.add(wrong);
            }
            if count <= RARE_MAX_COUNT {
                report.rare.add(wrong);
            }
        }
    }
    Ok(report)
}

/// Predicts on `test` and reports All/OOV/Rare error rates.
pub fn evaluate_tagger(
    tagger: &Tagger,
    test: &TaggedCorpus,
    reps: Option<&DenseReps>,
    train_counts: &HashMap<String, usize>,
) -> Result<TaggerReport> {
    let predicted = tagger.predict_corpus(test, reps)?;
    error_report(test, &predicted, train_counts)
}
