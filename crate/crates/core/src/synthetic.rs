//! Synthetic data drawn from a known model, for recovery experiments and
//! for the latent-label tagging task.

use std::ops::RangeInclusive;

use ndarray::{Array2, Array3};
use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::Sentence;
use crate::error::{FhmmError, Result};
use crate::features::{TaggedCorpus, TaggedSentence};
use crate::model::{FhmmParams, StateConfig};

/// A model with sticky transitions where every word prefers one state per
/// layer. Layer 0 carries the strongest word signal.
pub fn planted_params(layers: usize, states: usize, vocab_size: usize, seed: u64) -> Result<FhmmParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut noise = |scale: f64| rng.gen_range(-scale..=scale);
    let init = Array2::from_shape_fn((layers, states), |_| noise(0.5));
    let trans = Array3::from_shape_fn((layers, states, states), |(_, j, k)| {
        noise(0.5) + if j == k { 1.5 } else { 0.0 }
    });
    let mut obs = Array3::from_shape_fn((vocab_size, layers, states), |_| noise(0.3));
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    for w in 0..vocab_size {
        for m in 0..layers {
            let home = rng.gen_range(0..states);
            obs[[w, m, home]] += if m == 0 { 4.0 } else { 1.5 };
        }
    }
    FhmmParams::from_parts(init, trans, obs)
}

fn sample_len<R: Rng + ?Sized>(rng: &mut R, lengths: &RangeInclusive<usize>) -> Result<usize> {
    if lengths.is_empty() || *lengths.start() == 0 {
        return Err(FhmmError::InvalidArgument(format!(
            "invalid sentence lengths {lengths:?}"
        )));
    }
    Ok(rng.gen_range(lengths.clone()))
}

/// Draws `n` sentences with lengths uniform in `lengths`, returning them with
/// the generating state sequences.
pub fn sample_corpus<R: Rng + ?Sized>(
    params: &FhmmParams,
    n: usize,
    lengths: RangeInclusive<usize>,
    rng: &mut R,
) -> Result<(Vec<Sentence>, Vec<Vec<StateConfig>>)> {
    let mut sentences = Vec::with_capacity(n);
    let mut states = Vec::with_capacity(n);
    for _ in 0..n {
        let len = sample_len(rng, &lengths)?;
        let (configs, sentence) = params.sample(rng, len)?;
        sentences.push(sentence);
        states.push(configs);
    }
    Ok((sentences, states))
}

/// Re-draws each emission of a state sequence from the observation model
/// restricted to `allowed` words.
fn emit_restricted<R: Rng + ?Sized>(
    params: &FhmmParams,
    configs: &[StateConfig],
    allowed: &[u32],
    rng: &mut R,
) -> Result<Sentence> {
    let ids = configs
        .iter()
        .map(|c| {
            let logp: Vec<f64> = allowed.iter().map(|&y| params.observation_log_prob(c, y)).collect();
            let top = logp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<f64> = logp.iter().map(|l| (l - top).exp()).collect();
            let dist = WeightedIndex::new(&weights)
                .map_err(|e| FhmmError::InvalidArgument(format!("emission weights: {e}")))?;
            Ok(allowed[dist.sample(rng)])
        })
        .collect::<Result<Vec<_>>>()?;
    Sentence::new(ids)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentTaskConfig {
    pub layers: usize,
    pub states: usize,
    pub vocab_size: usize,
    /// Target share of test tokens whose word never occurs in tagger training.
    pub held_out_fraction: f64,
    pub n_unlabeled: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub lengths: RangeInclusive<usize>,
    pub seed: u64,
}

impl Default for LatentTaskConfig {
    fn default() -> Self {
        LatentTaskConfig {
            layers: 2,
            states: 3,
            vocab_size: 40,
            held_out_fraction: 0.3,
            n_unlabeled: 1500,
            n_train: 200,
            n_test: 200,
            lengths: 5..=15,
            seed: 0,
        }
    }
}

/// Tagging data whose label at each token is the generating layer-0 state.
#[derive(Debug, Clone)]
pub struct LatentLabelTask {
    pub model: FhmmParams,
    /// Unlabeled text over the full vocabulary, for representation learning.
    pub unlabeled: Vec<Sentence>,
    /// Labeled sentences that never use a held-out word.
    pub train: TaggedCorpus,
    /// Labeled sentences over the full vocabulary.
    pub test: TaggedCorpus,
    pub held_out: Vec<u32>,
}

pub fn word_name(id: u32) -> String {
    format!("w{id}")
}

fn tagged(sentence: Sentence, configs: &[StateConfig]) -> Result<TaggedSentence> {
    let words = sentence.ids().iter().map(|&y| word_name(y)).collect();
    let tags = configs.iter().map(|c| c.0[0] as u32).collect();
    TaggedSentence::new(words, sentence, tags)
}

pub fn latent_label_task(config: &LatentTaskConfig) -> Result<LatentLabelTask> {
    if !(config.held_out_fraction >= 0.0 && config.held_out_fraction < 1.0) {
        return Err(FhmmError::InvalidArgument(
            "held_out_fraction must lie in [0, 1)".into(),
        ));
    }
    let model = planted_params(config.layers, config.states, config.vocab_size, config.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(7));
    let (unlabeled, _) = sample_corpus(&model, config.n_unlabeled, config.lengths.clone(), &mut rng)?;

    // Hold out words, in random order, until they cover the target share of
    // unlabeled tokens.
    let mut freq = vec![0usize; config.vocab_size];
    for &y in unlabeled.iter().flat_map(|s| s.ids()) {
        freq[y as usize] += 1;
    }
    let total: usize = freq.iter().sum();
    let mut words: Vec<u32> = (0..config.vocab_size as u32).collect();
    words.shuffle(&mut rng);
    let mut held_out = Vec::new();
    let mut covered = 0usize;
    for &w in &words {
        if (covered as f64) >= config.held_out_fraction * total as f64 {
            break;
        }
        held_out.push(w);
        covered += freq[w as usize];
    }
    held_out.sort_unstable();
    let allowed: Vec<u32> = (0..config.vocab_size as u32)
        .filter(|w| held_out.binary_search(w).is_err())
        .collect();
    if allowed.is_empty() {
        return Err(FhmmError::InvalidArgument("every word was held out".into()));
    }

    let labels: Vec<String> = (0..config.states).map(|k| format!("L{k}")).collect();
    let mut train = Vec::with_capacity(config.n_train);
    for _ in 0..config.n_train {
        let len = sample_len(&mut rng, &config.lengths)?;
        let (configs, _) = model.sample(&mut rng, len)?;
        let sentence = emit_restricted(&model, &configs, &allowed, &mut rng)?;
        train.push(tagged(sentence, &configs)?);
    }
    let (test_sents, test_states) = sample_corpus(&model, config.n_test, config.lengths.clone(), &mut rng)?;
    let test = test_sents
        .into_iter()
        .zip(&test_states)
        .map(|(s, c)| tagged(s, c))
        .collect::<Result<Vec<_>>>()?;

    Ok(LatentLabelTask {
        model,
        unlabeled,
        train: TaggedCorpus {
            sentences: train,
            labels: labels.clone(),
        },
        test: TaggedCorpus {
            sentences: test,
            labels,
        },
        held_out,
    })
}
