use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rayon::prelude::*;

use crate::corpus::Sentence;
use crate::error::{FhmmError, Result};
use crate::inference::{VariationalInference, VariationalOptions, WarmStart};
use crate::model::FhmmParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FeatureMode {
    /// Per-layer MAP states of the fitted variational chains.
    Viterbi,
    /// Concatenated per-layer unary marginals.
    Posterior,
}

impl fmt::Display for FeatureMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FeatureMode::Viterbi => "viterbi",
            FeatureMode::Posterior => "posterior",
        })
    }
}

impl FromStr for FeatureMode {
    type Err = FhmmError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "viterbi" => Ok(FeatureMode::Viterbi),
            "posterior" => Ok(FeatureMode::Posterior),
            other => Err(FhmmError::InvalidArgument(format!(
                "unknown feature mode {other:?} (expected viterbi or posterior)"
            ))),
        }
    }
}

/// The representation of one token in context.
#[derive(Debug, Clone, PartialEq)]
pub enum TokenRepresentation {
    /// `M` state indices.
    Viterbi(Vec<usize>),
    /// `M·K` probabilities, layer-major.
    Posterior(Vec<f64>),
}

impl TokenRepresentation {
    /// Dense form: posterior vectors as-is, Viterbi states one-hot expanded to `M·K`.
    pub fn to_dense(&self, states: usize) -> Vec<f64> {
        match self {
            TokenRepresentation::Posterior(v) => v.clone(),
            TokenRepresentation::Viterbi(s) => {
                let mut out = vec![0.0; s.len() * states];
                for (m, &k) in s.iter().enumerate() {
                    out[m * states + k] = 1.0;
                }
                out
            }
        }
    }
}

/// Fits the variational posterior once and reads off one representation per token.
pub fn featurize(
    params: &FhmmParams,
    sentence: &Sentence,
    mode: FeatureMode,
    opts: &VariationalOptions,
) -> Result<Vec<TokenRepresentation>> {
    featurize_with(&VariationalInference::new(params), sentence, mode, opts)
}

fn featurize_with(
    engine: &VariationalInference<'_>,
    sentence: &Sentence,
    mode: FeatureMode,
    opts: &VariationalOptions,
) -> Result<Vec<TokenRepresentation>> {
    let (state, marg) = engine.fit(sentence, opts, &WarmStart::default())?;
    Ok(match mode {
        FeatureMode::Viterbi => engine
            .viterbi_decode(&state)
            .into_iter()
            .map(TokenRepresentation::Viterbi)
            .collect(),
        FeatureMode::Posterior => marg
            .unary
            .outer_iter()
            .map(|row| TokenRepresentation::Posterior(row.iter().copied().collect()))
            .collect(),
    })
}

/// [`featurize`] over many sentences in parallel; output order follows input order.
pub fn featurize_corpus(
    params: &FhmmParams,
    sentences: &[Sentence],
    mode: FeatureMode,
    opts: &VariationalOptions,
) -> Result<Vec<Vec<TokenRepresentation>>> {
    let engine = VariationalInference::new(params);
    sentences
        .par_iter()
        .map(|s| featurize_with(&engine, s, mode, opts))
        .collect()
}

/// How token vectors are laid out in a feature file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureFileFormat {
    Posterior,
    /// `M` integers.
    Viterbi,
    /// `M·K` zeros and ones.
    ViterbiOneHot,
}

impl FeatureFileFormat {
    pub fn mode(self) -> FeatureMode {
        match self {
            FeatureFileFormat::Posterior => FeatureMode::Posterior,
            _ => FeatureMode::Viterbi,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FeatureFileFormat::Posterior => "posterior",
            FeatureFileFormat::Viterbi => "viterbi",
            FeatureFileFormat::ViterbiOneHot => "viterbi-onehot",
        }
    }
}

/// Formats a float with 6 significant digits.
pub fn format_sig6(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let exp = x.abs().log10().floor() as i32;
    if (-5..6).contains(&exp) {
        let decimals = (5 - exp).max(0) as usize;
        let s = format!("{x:.decimals$}");
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    } else {
        format!("{x:.5e}")
    }
}

/// Writes representations as `<sentence>\t<token>\t<word>\t<v1,...>` lines,
/// one blank line between sentences, after a `#mode=` header.
pub fn write_feature_file<W: Write, S: AsRef<str>>(
    mut out: W,
    format: FeatureFileFormat,
    states: usize,
    words: &[Vec<S>],
    reps: &[Vec<TokenRepresentation>],
) -> Result<()> {
    if words.len() != reps.len() {
        return Err(FhmmError::LengthMismatch {
            expected: words.len(),
            actual: reps.len(),
        });
    }
    writeln!(out, "#mode={}", format.name())?;
    for (i, (ws, rs)) in words.iter().zip(reps).enumerate() {
        if ws.len() != rs.len() {
            return Err(FhmmError::LengthMismatch {
                expected: ws.len(),
                actual: rs.len(),
            });
        }
        if i > 0 {
            writeln!(out)?;
        }
        for (j, (w, r)) in ws.iter().zip(rs).enumerate() {
            let values: Vec<String> = match (format, r) {
                (FeatureFileFormat::Viterbi, TokenRepresentation::Viterbi(s)) => {
                    s.iter().map(|k| k.to_string()).collect()
                }
                (FeatureFileFormat::ViterbiOneHot, r @ TokenRepresentation::Viterbi(_)) => {
                    r.to_dense(states).iter().map(|&x| (x as u8).to_string()).collect()
                }
                (FeatureFileFormat::Posterior, TokenRepresentation::Posterior(v)) => {
                    v.iter().map(|&x| format_sig6(x)).collect()
                }
                _ => {
                    return Err(FhmmError::InvalidArgument(format!(
                        "representation does not match feature format {}",
                        format.name()
                    )))
                }
            };
            writeln!(out, "{i}\t{j}\t{}\t{}", w.as_ref(), values.join(","))?;
        }
    }
    out.flush()?;
    Ok(())
}
