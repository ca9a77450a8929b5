use std::fmt;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use fhmm::corpus::read_tokenized;
use fhmm::features::{
    dense_reps, evaluate_tagger, featurize_corpus, read_tagged, train_tagger, write_feature_file, FeatureFileFormat,
    TaggerOptions, TaggerReport,
};
use fhmm::inference::{VariationalInference, VariationalOptions, WarmStart};
use fhmm::learning::{train_full_batch_from, train_online_from, ProgressRecord, TrainConfig};
use fhmm::oracle::{exact_infer, exact_kl};
use fhmm::{Corpus, FhmmError, FhmmParams, Vocab};
use log::info;

use crate::config::ConfigFile;
use crate::{ModelInput, TrainArgs, UsageError};

/// Some oracle comparison was outside tolerance.
#[derive(Debug)]
pub struct CheckFailed {
    failed: usize,
    total: usize,
}

impl fmt::Display for CheckFailed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "oracle check failed on {} of {} sentences", self.failed, self.total)
    }
}

impl std::error::Error for CheckFailed {}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if !path.is_file() {
        bail!(UsageError(format!("{what} {} does not exist", path.display())));
    }
    Ok(())
}

fn require_output(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() && !dir.is_dir() => {
            bail!(UsageError(format!("output directory {} does not exist", dir.display())))
        }
        _ => Ok(()),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(file))
}

fn load_model_and_vocab(model: &Path, vocab: &Path) -> Result<(FhmmParams, Vocab)> {
    let params = FhmmParams::load(model).with_context(|| format!("loading model {}", model.display()))?;
    let vocab = Vocab::load(vocab).with_context(|| format!("loading vocabulary {}", vocab.display()))?;
    if params.vocab_size() != vocab.len() {
        return Err(FhmmError::VocabMismatch {
            model: params.vocab_size(),
            vocab: vocab.len(),
        }
        .into());
    }
    Ok((params, vocab))
}

/// Model, vocabulary and the corpus encoded under it, plus the raw words.
fn load_inputs(io: &ModelInput) -> Result<(FhmmParams, Corpus, Vec<Vec<String>>)> {
    require_file(&io.model, "model")?;
    require_file(&io.vocab, "vocabulary")?;
    require_file(&io.corpus, "corpus")?;
    let (params, vocab) = load_model_and_vocab(&io.model, &io.vocab)?;
    let raw = read_tokenized(&io.corpus).with_context(|| format!("reading corpus {}", io.corpus.display()))?;
    let corpus = Corpus::encode(vocab, &raw)?;
    Ok((params, corpus, raw))
}

pub fn build_vocab(corpus: &Path, min_count: u64, output: &Path) -> Result<()> {
    require_file(corpus, "corpus")?;
    require_output(output)?;
    let raw = read_tokenized(corpus).with_context(|| format!("reading corpus {}", corpus.display()))?;
    let vocab = Vocab::build(&raw, min_count)?;
    vocab
        .save(output)
        .with_context(|| format!("writing {}", output.display()))?;
    println!("V={}", vocab.len());
    Ok(())
}

fn train_config(args: &TrainArgs, cfg: &ConfigFile) -> Result<TrainConfig> {
    let d = TrainConfig::default();
    let config = TrainConfig {
        layers: cfg.resolve(args.layers, "layers", d.layers)?,
        states: cfg.resolve(args.states, "states", d.states)?,
        epochs: cfg.resolve(args.epochs, "epochs", d.epochs)?,
        minibatch_size: cfg.resolve(args.minibatch_size, "minibatch_size", d.minibatch_size)?,
        estep_max_iters: cfg.resolve(args.estep_max_iters, "estep_max_iters", d.estep_max_iters)?,
        estep_tol: cfg.resolve(args.estep_tol, "estep_tol", d.estep_tol)?,
        mstep_max_iters: cfg.resolve(args.mstep_max_iters, "mstep_max_iters", d.mstep_max_iters)?,
        mstep_minibatch_iters: cfg.resolve(
            args.mstep_minibatch_iters,
            "mstep_minibatch_iters",
            d.mstep_minibatch_iters,
        )?,
        l2: cfg.resolve(args.l2, "l2", d.l2)?,
        stepwise_decay: cfg.resolve(args.stepwise_decay, "stepwise_decay", d.stepwise_decay)?,
        seed: cfg.resolve(args.seed, "seed", d.seed)?,
        init_scale: cfg.resolve(args.init_scale, "init_scale", d.init_scale)?,
        max_em_iters: cfg.resolve(args.max_em_iters, "max_em_iters", d.max_em_iters)?,
        em_rel_tol: cfg.resolve(args.em_rel_tol, "em_rel_tol", d.em_rel_tol)?,
    };
    config.validate()?;
    Ok(config)
}

pub fn train(args: &TrainArgs, cfg: &ConfigFile) -> Result<()> {
    let config = train_config(args, cfg)?;
    let full_batch = cfg.switch(args.full_batch, "full_batch")?;
    require_file(&args.corpus, "corpus")?;
    require_file(&args.vocab, "vocabulary")?;
    require_output(&args.output)?;
    if let Some(log) = &args.log {
        require_output(log)?;
    }

    let vocab = Vocab::load(&args.vocab).with_context(|| format!("loading vocabulary {}", args.vocab.display()))?;
    let raw = read_tokenized(&args.corpus).with_context(|| format!("reading corpus {}", args.corpus.display()))?;
    let corpus = Corpus::encode(vocab, &raw)?;
    let v = corpus.vocab.len();
    println!(
        "M={} K={} V={} mode={} epochs={} minibatch={} sentences={} tokens={} seed={}",
        config.layers,
        config.states,
        v,
        if full_batch { "full-batch" } else { "online" },
        config.epochs,
        config.minibatch_size,
        corpus.sentences.len(),
        corpus.n_tokens(),
        config.seed,
    );

    let mut log: Box<dyn Write> = match &args.log {
        Some(path) => Box::new(create(path)?),
        None => Box::new(io::stderr()),
    };
    writeln!(log, "{}", ProgressRecord::HEADER)?;
    let mut log_error = None;
    let mut record = |r: &ProgressRecord| {
        if log_error.is_none() {
            if let Err(e) = writeln!(log, "{r}").and_then(|_| log.flush()) {
                log_error = Some(e);
            }
        }
    };

    let init = FhmmParams::random(config.layers, config.states, v, config.seed, config.init_scale)?;
    let params = if full_batch {
        let (params, trace) = train_full_batch_from(init, &corpus.sentences, &config, Some(&mut record))?;
        info!("full-batch EM finished after {} iterations", trace.len());
        params
    } else {
        train_online_from(init, &corpus.sentences, &config, Some(&mut record))?
    };
    if let Some(e) = log_error {
        return Err(e).context("writing progress log");
    }
    params
        .save(&args.output)
        .with_context(|| format!("writing model {}", args.output.display()))?;
    info!("model written to {}", args.output.display());
    Ok(())
}

pub fn featurize(io: &ModelInput, format: FeatureFileFormat, output: &Path) -> Result<()> {
    require_output(output)?;
    let (params, corpus, raw) = load_inputs(io)?;
    let reps = featurize_corpus(
        &params,
        &corpus.sentences,
        format.mode(),
        &VariationalOptions::default(),
    )?;
    let mut out = create(output)?;
    write_feature_file(&mut out, format, params.states(), &non_empty(raw), &reps)?;
    out.flush()?;
    Ok(())
}

/// Drops blank sentences, matching what [`Corpus::encode`] keeps.
fn non_empty(raw: Vec<Vec<String>>) -> Vec<Vec<String>> {
    raw.into_iter().filter(|s| !s.is_empty()).collect()
}

pub fn decode(io: &ModelInput, output: Option<&Path>) -> Result<()> {
    if let Some(path) = output {
        require_output(path)?;
    }
    let (params, corpus, raw) = load_inputs(io)?;
    let reps = featurize_corpus(
        &params,
        &corpus.sentences,
        FeatureFileFormat::Viterbi.mode(),
        &VariationalOptions::default(),
    )?;
    let mut out: Box<dyn Write> = match output {
        Some(path) => Box::new(create(path)?),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    };
    write_feature_file(
        &mut out,
        FeatureFileFormat::Viterbi,
        params.states(),
        &non_empty(raw),
        &reps,
    )?;
    out.flush()?;
    Ok(())
}

/// Marginal deviation allowed for single-chain models, where the fit should be exact.
const EXACT_TOL: f64 = 1e-6;
/// Slack on `KL_exact ≤ KL̄`.
const SANDWICH_TOL: f64 = 1e-8;
/// Slack on `KL_exact ≥ 0` for rounding.
const NONNEG_TOL: f64 = 1e-10;

pub fn oracle_check(io: &ModelInput, limit: u64) -> Result<()> {
    let (params, corpus, _) = load_inputs(io)?;
    let engine = VariationalInference::new(&params);
    let opts = VariationalOptions {
        max_iters: 500,
        tol: 1e-12,
    };
    println!("sentence\tT\tlog_likelihood\tmax_marginal_dev\tkl_exact\tkl_bar\tstatus");
    let mut failed = 0;
    for (i, sentence) in corpus.sentences.iter().enumerate() {
        let exact = exact_infer(&params, sentence, limit)?;
        let (state, marg) = engine.fit(sentence, &opts, &WarmStart::default())?;
        let dev = exact
            .unary
            .iter()
            .zip(marg.unary.iter())
            .chain(exact.pairwise.iter().zip(marg.pairwise.iter()))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        let kl_exact = exact_kl(&params, sentence, state.obs_potentials.view(), limit)?;
        let kl_bar = engine.kl_surrogate(sentence, &state, &marg)? + exact.log_likelihood;
        let mut ok = kl_exact >= -NONNEG_TOL && kl_exact <= kl_bar + SANDWICH_TOL;
        if params.layers() == 1 {
            ok &= dev < EXACT_TOL;
        }
        if !ok {
            failed += 1;
        }
        println!(
            "{i}\t{}\t{:.6}\t{:.3e}\t{:.6e}\t{:.6e}\t{}",
            sentence.len(),
            exact.log_likelihood,
            dev,
            kl_exact,
            kl_bar,
            if ok { "PASS" } else { "FAIL" }
        );
    }
    let total = corpus.sentences.len();
    println!(
        "{} {}/{} sentences",
        if failed == 0 { "PASS" } else { "FAIL" },
        total - failed,
        total
    );
    if failed > 0 {
        return Err(CheckFailed { failed, total }.into());
    }
    Ok(())
}

pub fn eval_tagger(
    model: &Path,
    vocab: &Path,
    train: &Path,
    test: &Path,
    format: FeatureFileFormat,
    opts: &TaggerOptions,
) -> Result<()> {
    for (path, what) in [
        (model, "model"),
        (vocab, "vocabulary"),
        (train, "training file"),
        (test, "test file"),
    ] {
        require_file(path, what)?;
    }
    let (params, vocab) = load_model_and_vocab(model, vocab)?;
    let train_set = read_tagged(train, &vocab, &[]).with_context(|| format!("reading {}", train.display()))?;
    let test_set =
        read_tagged(test, &vocab, &train_set.labels).with_context(|| format!("reading {}", test.display()))?;
    if test_set.labels.len() > train_set.labels.len() {
        let unseen = &test_set.labels[train_set.labels.len()..];
        bail!(UsageError(format!(
            "test labels not present in the training data: {}",
            unseen.join(", ")
        )));
    }

    let counts = train_set.word_counts();
    let mode = format.mode();
    let vopts = VariationalOptions::default();
    let train_reps = dense_reps(
        &featurize_corpus(&params, &train_set.id_sentences(), mode, &vopts)?,
        params.states(),
    );
    let test_reps = dense_reps(
        &featurize_corpus(&params, &test_set.id_sentences(), mode, &vopts)?,
        params.states(),
    );

    let baseline = train_tagger(&train_set, None, opts)?;
    let baseline_report = evaluate_tagger(&baseline, &test_set, None, &counts)?;
    let with_reps = train_tagger(&train_set, Some(&train_reps), opts)?;
    let reps_report = evaluate_tagger(&with_reps, &test_set, Some(&test_reps), &counts)?;

    println!("features\t{}", TaggerReport::HEADER);
    println!("baseline\t{baseline_report}");
    println!("fhmm-{}\t{reps_report}", format.name());
    Ok(())
}
