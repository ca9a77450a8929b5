use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use crate::corpus::{Sentence, Vocab};
use crate::error::{FhmmError, Result};

/// A labeled sentence: surface words, their ids under the model vocabulary,
/// and dense label ids.
#[derive(Debug, Clone, PartialEq)]
pub struct TaggedSentence {
    pub words: Vec<String>,
    pub ids: Sentence,
    pub labels: Vec<u32>,
}

impl TaggedSentence {
    pub fn new(words: Vec<String>, ids: Sentence, labels: Vec<u32>) -> Result<Self> {
        if words.len() != ids.len() || labels.len() != ids.len() {
            return Err(FhmmError::LengthMismatch {
                expected: ids.len(),
                actual: if words.len() != ids.len() {
                    words.len()
                } else {
                    labels.len()
                },
            });
        }
        Ok(TaggedSentence { words, ids, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaggedCorpus {
    pub sentences: Vec<TaggedSentence>,
    /// Label names, indexed by label id.
    pub labels: Vec<String>,
}

impl TaggedCorpus {
    pub fn n_tokens(&self) -> usize {
        self.sentences.iter().map(TaggedSentence::len).sum()
    }

    pub fn id_sentences(&self) -> Vec<Sentence> {
        self.sentences.iter().map(|s| s.ids.clone()).collect()
    }

    /// Occurrence count of every surface word.
    pub fn word_counts(&self) -> HashMap<String, usize> {
        let mut counts = HashMap::new();
        for w in self.sentences.iter().flat_map(|s| &s.words) {
            *counts.entry(w.clone()).or_insert(0) += 1;
        }
        counts
    }
}

/// Reads `word<TAB>label` lines with blank lines between sentences.
///
/// Labels are numbered in order of first appearance after any labels
/// already in `labels`, so a test file can share the training alphabet.
pub fn read_tagged(path: impl AsRef<Path>, vocab: &Vocab, labels: &[String]) -> Result<TaggedCorpus> {
    let path = path.as_ref();
    let reader = BufReader::new(File::open(path)?);
    let mut label_ids: HashMap<String, u32> = labels.iter().enumerate().map(|(i, l)| (l.clone(), i as u32)).collect();
    let mut alphabet = labels.to_vec();
    let mut sentences = Vec::new();
    let mut words: Vec<String> = Vec::new();
    let mut tags: Vec<u32> = Vec::new();
    let mut flush = |words: &mut Vec<String>, tags: &mut Vec<u32>| -> Result<()> {
        if !words.is_empty() {
            let ids = vocab.encode(words)?;
            sentences.push(TaggedSentence::new(std::mem::take(words), ids, std::mem::take(tags))?);
        }
        Ok(())
    };
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            flush(&mut words, &mut tags)?;
            continue;
        }
        let mut parts = line.split('\t');
        let (Some(word), Some(label), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(FhmmError::Parse {
                path: path.to_path_buf(),
                line: n + 1,
                message: "expected `word<TAB>label`".into(),
            });
        };
        if word.is_empty() || label.is_empty() {
            return Err(FhmmError::Parse {
                path: path.to_path_buf(),
                line: n + 1,
                message: "empty word or label".into(),
            });
        }
        let next = alphabet.len() as u32;
        let id = *label_ids.entry(label.to_string()).or_insert_with(|| {
            alphabet.push(label.to_string());
            next
        });
        words.push(word.to_string());
        tags.push(id);
    }
    flush(&mut words, &mut tags)?;
    Ok(TaggedCorpus {
        sentences,
        labels: alphabet,
    })
}
