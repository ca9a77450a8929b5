//! Vocabulary construction and sentence encoding.
//!
//! Input text is pre-tokenized: one sentence per line, tokens separated by
//! spaces. Numeric tokens collapse to [`NUM_TOKEN`] and tokens seen fewer
//! than `min_count` times collapse to [`UNK_TOKEN`].

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::error::{FhmmError, Result};

pub const UNK_TOKEN: &str = "*unk*";
pub const NUM_TOKEN: &str = "*num*";
pub const DEFAULT_MIN_COUNT: u64 = 2;

/// Returns [`NUM_TOKEN`] for numeric tokens, otherwise the token itself.
///
/// A token is numeric if, after dropping at most one leading sign and every
/// `,` and `.`, what remains is a non-empty run of ASCII digits.
pub fn normalize_token(raw: &str) -> &str {
    if is_numeric(raw) {
        NUM_TOKEN
    } else {
        raw
    }
}

fn is_numeric(raw: &str) -> bool {
    let body = raw.strip_prefix('+').or_else(|| raw.strip_prefix('-')).unwrap_or(raw);
    let mut digits = 0usize;
    for c in body.chars() {
        match c {
            '0'..='9' => digits += 1,
            ',' | '.' => {}
            _ => return false,
        }
    }
    digits > 0
}

/// A dense token ↔ id mapping. Ids 0 and 1 are reserved for the unknown
/// and numeric symbols.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    token_to_id: HashMap<String, u32>,
    id_to_token: Vec<String>,
    counts: Vec<u64>,
    min_count: u64,
}

impl Vocab {
    pub const UNK_ID: u32 = 0;
    pub const NUM_ID: u32 = 1;

    fn with_specials(min_count: u64) -> Self {
        let mut vocab = Vocab {
            token_to_id: HashMap::new(),
            id_to_token: Vec::new(),
            counts: Vec::new(),
            min_count,
        };
        vocab.push(UNK_TOKEN.to_string(), 0);
        vocab.push(NUM_TOKEN.to_string(), 0);
        vocab
    }

    fn push(&mut self, token: String, count: u64) {
        let id = self.id_to_token.len() as u32;
        self.token_to_id.insert(token.clone(), id);
        self.id_to_token.push(token);
        self.counts.push(count);
    }

    /// Builds a vocabulary from tokenized sentences.
    ///
    /// Frequencies are counted after numeric normalization. Retained tokens
    /// are ordered by descending count, then lexicographically, so the
    /// result does not depend on sentence order.
    pub fn build<S: AsRef<str> + Sync>(sentences: &[Vec<S>], min_count: u64) -> Result<Self> {
        if min_count == 0 {
            return Err(FhmmError::InvalidArgument("min_count must be at least 1".into()));
        }
        let freq = sentences
            .par_iter()
            .fold(HashMap::<&str, u64>::new, |mut acc, sentence| {
                for tok in sentence {
                    *acc.entry(normalize_token(tok.as_ref())).or_default() += 1;
                }
                acc
            })
            .reduce(HashMap::new, |mut a, b| {
                for (tok, n) in b {
                    *a.entry(tok).or_default() += n;
                }
                a
            });

        let mut vocab = Vocab::with_specials(min_count);
        let mut retained: Vec<(&str, u64)> = Vec::new();
        for (&tok, &n) in &freq {
            if tok == NUM_TOKEN {
                vocab.counts[Self::NUM_ID as usize] += n;
            } else if tok == UNK_TOKEN || n < min_count {
                vocab.counts[Self::UNK_ID as usize] += n;
            } else {
                retained.push((tok, n));
            }
        }
        retained.sort_unstable_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        for (tok, n) in retained {
            vocab.push(tok.to_string(), n);
        }
        Ok(vocab)
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn min_count(&self) -> u64 {
        self.min_count
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    pub fn count(&self, id: u32) -> u64 {
        self.counts.get(id as usize).copied().unwrap_or(0)
    }

    pub fn tokens(&self) -> impl Iterator<Item = (u32, &str, u64)> {
        self.id_to_token
            .iter()
            .zip(&self.counts)
            .enumerate()
            .map(|(i, (t, &c))| (i as u32, t.as_str(), c))
    }

    /// Maps a raw token to its id: numerics to `*num*`, unknown tokens to `*unk*`.
    pub fn lookup(&self, raw: &str) -> u32 {
        self.id(normalize_token(raw)).unwrap_or(Self::UNK_ID)
    }

    pub fn encode<S: AsRef<str>>(&self, raw: &[S]) -> Result<Sentence> {
        if raw.is_empty() {
            return Err(FhmmError::EmptySentence);
        }
        Ok(Sentence {
            ids: raw.iter().map(|t| self.lookup(t.as_ref())).collect(),
        })
    }

    pub fn decode(&self, sentence: &Sentence) -> Vec<&str> {
        sentence
            .ids()
            .iter()
            .map(|&id| self.token(id).unwrap_or(UNK_TOKEN))
            .collect()
    }

    /// Writes one `<id>\t<token>\t<count>` record per line.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        for (id, tok, count) in self.tokens() {
            writeln!(w, "{id}\t{tok}\t{count}")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let parse_err = |line: usize, message: String| FhmmError::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let reader = BufReader::new(File::open(path)?);
        let mut vocab = Vocab {
            token_to_id: HashMap::new(),
            id_to_token: Vec::new(),
            counts: Vec::new(),
            min_count: DEFAULT_MIN_COUNT,
        };
        for (lineno, line) in reader.lines().enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let mut fields = line.split('\t');
            let (Some(id), Some(tok), Some(count), None) = (fields.next(), fields.next(), fields.next(), fields.next())
            else {
                return Err(parse_err(lineno + 1, "expected <id>\\t<token>\\t<count>".into()));
            };
            let id: usize = id
                .parse()
                .map_err(|_| parse_err(lineno + 1, format!("bad id {id:?}")))?;
            let count: u64 = count
                .parse()
                .map_err(|_| parse_err(lineno + 1, format!("bad count {count:?}")))?;
            if id != vocab.len() {
                return Err(parse_err(
                    lineno + 1,
                    format!("expected id {}, found {id}", vocab.len()),
                ));
            }
            if vocab.token_to_id.contains_key(tok) {
                return Err(parse_err(lineno + 1, format!("duplicate token {tok:?}")));
            }
            vocab.push(tok.to_string(), count);
        }
        if vocab.token(Self::UNK_ID) != Some(UNK_TOKEN) || vocab.token(Self::NUM_ID) != Some(NUM_TOKEN) {
            return Err(parse_err(1, "ids 0 and 1 must be *unk* and *num*".into()));
        }
        Ok(vocab)
    }
}

/// An encoded sentence of length at least one.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Sentence {
    ids: Vec<u32>,
}

impl Sentence {
    pub fn new(ids: Vec<u32>) -> Result<Self> {
        if ids.is_empty() {
            return Err(FhmmError::EmptySentence);
        }
        Ok(Sentence { ids })
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        match self.ids.iter().find(|&&id| id as usize >= vocab_size) {
            Some(&id) => Err(FhmmError::TokenOutOfRange { id, vocab_size }),
            None => Ok(()),
        }
    }
}

impl From<Sentence> for Vec<u32> {
    fn from(s: Sentence) -> Self {
        s.ids
    }
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub vocab: Vocab,
    pub sentences: Vec<Sentence>,
}

impl Corpus {
    pub fn encode<S: AsRef<str>>(vocab: Vocab, raw: &[Vec<S>]) -> Result<Self> {
        let sentences = raw
            .iter()
            .filter(|s| !s.is_empty())
            .map(|s| vocab.encode(s))
            .collect::<Result<Vec<_>>>()?;
        Ok(Corpus { vocab, sentences })
    }

    pub fn n_tokens(&self) -> usize {
        self.sentences.iter().map(Sentence::len).sum()
    }
}

/// Reads a tokenized corpus: one sentence per line, space-separated tokens.
/// Blank lines are skipped.
pub fn read_tokenized(path: impl AsRef<Path>) -> Result<Vec<Vec<String>>> {
    let reader = BufReader::new(File::open(path)?);
    let mut sentences = Vec::new();
    for line in reader.lines() {
        let line = line?;
        let tokens: Vec<String> = line.split(' ').filter(|t| !t.is_empty()).map(str::to_string).collect();
        if !tokens.is_empty() {
            sentences.push(tokens);
        }
    }
    Ok(sentences)
}
