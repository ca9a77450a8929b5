//! Factorial hidden Markov models over discrete tokens, trained with a
//! two-level structured variational EM, and the per-token distributed
//! representations they induce.
//!
//! The pieces, bottom-up:
//!
//! * [`corpus`]: vocabulary with rare-word and number collapsing.
//! * [`model`]: log-linear initial/transition/observation parameters.
//! * [`inference`]: forward-backward, Viterbi and the variational fixed point.
//! * [`oracle`]: exhaustive enumeration for tiny instances.
//! * [`learning`]: sufficient statistics, M-steps, batch and online EM.
//! * [`features`]: representation extraction and a small tagging harness.
//!
//! ```
//! use fhmm::inference::{VariationalInference, VariationalOptions, WarmStart};
//! use fhmm::{FhmmParams, Sentence};
//!
//! let params = FhmmParams::random(2, 3, 10, 7, 0.5)?;
//! let sentence = Sentence::new(vec![4, 1, 9, 2])?;
//! let engine = VariationalInference::new(&params);
//! let (state, marginals) = engine.fit(&sentence, &VariationalOptions::default(), &WarmStart::default())?;
//! assert_eq!(marginals.unary.dim(), (4, 2, 3));
//! assert!(engine.surrogate_bound(&sentence, &state, &marginals)? < 0.0);
//! # Ok::<(), fhmm::FhmmError>(())
//! ```

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod corpus;
pub mod error;
pub mod features;
pub mod inference;
pub mod learning;
pub mod math;
pub mod model;
pub mod optim;
pub mod oracle;
pub mod synthetic;

pub use corpus::{Corpus, Sentence, Vocab};
pub use error::{FhmmError, Result};
pub use model::{FhmmParams, StateConfig};

/// Book chapters and the README, compiled so their code blocks run as doctests.
#[cfg(doctest)]
pub mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub mod introduction {}
    #[doc = include_str!("../../../book/src/model.md")]
    pub mod model {}
    #[doc = include_str!("../../../book/src/inference.md")]
    pub mod inference {}
    #[doc = include_str!("../../../book/src/learning.md")]
    pub mod learning {}
    #[doc = include_str!("../../../book/src/representations.md")]
    pub mod representations {}
    #[doc = include_str!("../../../book/src/cli.md")]
    pub mod cli {}
    #[doc = include_str!("../../../README.md")]
    pub mod readme {}
}
