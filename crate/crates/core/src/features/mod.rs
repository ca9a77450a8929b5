//! Token representations read off a trained model, and a small
//! logistic-regression tagging harness that measures what they add over
//! word identity, overall and on OOV and rare words.

mod repr;
mod tagged;
mod tagger;

pub use repr::{
    featurize, featurize_corpus, format_sig6, write_feature_file, FeatureFileFormat, FeatureMode, TokenRepresentation,
};
pub use tagged::{read_tagged, TaggedCorpus, TaggedSentence};
pub use tagger::{
    error_report, evaluate_tagger, train_tagger, DenseReps, ErrorCount, Tagger, TaggerOptions, TaggerReport,
    RARE_MAX_COUNT,
};

/// Dense vectors for every token, Viterbi states expanded to one-hot.
pub fn dense_reps(reps: &[Vec<TokenRepresentation>], states: usize) -> Vec<Vec<Vec<f64>>> {
    reps.iter()
        .map(|s| s.iter().map(|r| r.to_dense(states)).collect())
        .collect()
}
