mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use fhmm::features::FeatureFileFormat;
use fhmm::FhmmError;

use config::ConfigFile;

/// Factorial HMM word representations: train, featurize, decode, validate.
#[derive(Debug, Parser)]
#[command(name = "fhmm", version)]
struct Cli {
    /// Worker threads; 1 forces serial reductions. Defaults to all cores.
    #[arg(long, global = true, env = "FHMM_THREADS")]
    threads: Option<usize>,

    /// Flat `key = value` file; command-line flags take precedence over it.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Count tokens and write a vocabulary file.
    BuildVocab {
        /// Tokenized corpus, one sentence per line.
        corpus: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        /// Tokens seen fewer times become `*unk*` [default: 2]
        #[arg(long)]
        min_count: Option<u64>,
    },
    /// Train a model with online (default) or full-batch EM.
    Train(TrainArgs),
    /// Write per-token representations.
    Featurize {
        #[command(flatten)]
        io: ModelInput,
        #[arg(long, value_enum, default_value_t = FeatureKind::Posterior)]
        mode: FeatureKind,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Print per-layer Viterbi states for every token.
    Decode {
        #[command(flatten)]
        io: ModelInput,
        /// Defaults to stdout.
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Compare variational inference with exhaustive enumeration.
    OracleCheck {
        #[command(flatten)]
        io: ModelInput,
        /// Largest number of latent sequences to enumerate per sentence [default: 10000000]
        #[arg(long)]
        limit: Option<u64>,
    },
    /// Tagging error with and without representations.
    EvalTagger {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        /// `word<TAB>label` lines, blank line between sentences.
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long, value_enum, default_value_t = FeatureKind::Posterior)]
        mode: FeatureKind,
        /// L2 strength [default: 0.001]
        #[arg(long)]
        reg: Option<f64>,
        /// L-BFGS iterations [default: 500]
        #[arg(long)]
        max_iters: Option<usize>,
        /// Neighbouring tokens whose representations are used on each side [default: 2]
        #[arg(long)]
        window: Option<usize>,
    },
}

#[derive(Debug, Args)]
struct ModelInput {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    /// Tokenized corpus, one sentence per line.
    #[arg(long)]
    corpus: PathBuf,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    /// Where to write the model.
    #[arg(short, long)]
    output: PathBuf,
    /// Progress log (TSV); defaults to stderr.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Batch EM over the whole corpus instead of stepwise mini-batches.
    #[arg(long)]
    full_batch: bool,
    /// Number of chains M [default: 5]
    #[arg(long)]
    layers: Option<usize>,
    /// States per chain K [default: 10]
    #[arg(long)]
    states: Option<usize>,
    /// Online passes over the corpus [default: 5]
    #[arg(long)]
    epochs: Option<usize>,
    /// Sentences per online mini-batch [default: 1000]
    #[arg(long)]
    minibatch_size: Option<usize>,
    /// Fixed-point sweeps per sentence [default: 25]
    #[arg(long)]
    estep_max_iters: Option<usize>,
    /// Marginal change that ends the fixed point [default: 1e-6]
    #[arg(long)]
    estep_tol: Option<f64>,
    /// L-BFGS iterations per full-batch observation step [default: 100]
    #[arg(long)]
    mstep_max_iters: Option<usize>,
    /// L-BFGS iterations per mini-batch observation step [default: 10]
    #[arg(long)]
    mstep_minibatch_iters: Option<usize>,
    /// L2 penalty on observation logits [default: 0]
    #[arg(long)]
    l2: Option<f64>,
    /// Stepwise decay in (0.5, 1] [default: 0.6]
    #[arg(long)]
    stepwise_decay: Option<f64>,
    /// [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Spread of the random initial logits [default: 0.1]
    #[arg(long)]
    init_scale: Option<f64>,
    /// Full-batch EM iteration cap [default: 50]
    #[arg(long)]
    max_em_iters: Option<usize>,
    /// Full-batch relative improvement that counts as converged [default: 1e-5]
    #[arg(long)]
    em_rel_tol: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum FeatureKind {
    Posterior,
    Viterbi,
    ViterbiOnehot,
}

impl From<FeatureKind> for FeatureFileFormat {
    fn from(kind: FeatureKind) -> Self {
        match kind {
            FeatureKind::Posterior => FeatureFileFormat::Posterior,
            FeatureKind::Viterbi => FeatureFileFormat::Viterbi,
            FeatureKind::ViterbiOnehot => FeatureFileFormat::ViterbiOneHot,
        }
    }
}

/// Bad flags, config values or missing inputs; exits with code 1.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return EXIT_USAGE;
        }
        if cause.is::<commands::CheckFailed>() {
            return EXIT_NUMERIC;
        }
        if let Some(e) = cause.downcast_ref::<FhmmError>() {
            return match e {
                e if e.is_numeric() => EXIT_NUMERIC,
                FhmmError::InvalidArgument(_) | FhmmError::InvalidDimensions(_) => EXIT_USAGE,
                _ => EXIT_DATA,
            };
        }
    }
    EXIT_DATA
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = match &cli.config {
        Some(path) => ConfigFile::load(path)?,
        None => ConfigFile::default(),
    };
    if let Some(threads) = cli
        .threads
        .map_or_else(|| cfg.get::<usize>("threads"), |t| Ok(Some(t)))?
    {
        if threads == 0 {
            anyhow::bail!(UsageError("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new().num_threads(threads).build_global()?;
    }
    match cli.command {
        Command::BuildVocab {
            corpus,
            output,
            min_count,
        } => {
            let min_count = cfg.resolve(min_count, "min_count", fhmm::corpus::DEFAULT_MIN_COUNT)?;
            commands::build_vocab(&corpus, min_count, &output)
        }
        Command::Train(args) => commands::train(&args, &cfg),
        Command::Featurize { io, mode, output } => commands::featurize(&io, mode.into(), &output),
        Command::Decode { io, output } => commands::decode(&io, output.as_deref()),
        Command::OracleCheck { io, limit } => {
            let limit = cfg.resolve(limit, "oracle_limit", fhmm::oracle::DEFAULT_ORACLE_LIMIT)?;
            commands::oracle_check(&io, limit)
        }
        Command::EvalTagger {
            model,
            vocab,
            train,
            test,
            mode,
            reg,
            max_iters,
            window,
        } => {
            let defaults = fhmm::features::TaggerOptions::default();
            let opts = fhmm::features::TaggerOptions {
                reg: cfg.resolve(reg, "tagger_reg", defaults.reg)?,
                max_iters: cfg.resolve(max_iters, "tagger_max_iters", defaults.max_iters)?,
                window: cfg.resolve(window, "tagger_window", defaults.window)?,
                ..defaults
            };
            commands::eval_tagger(&model, &vocab, &train, &test, mode.into(), &opts)
        }
    }
}
