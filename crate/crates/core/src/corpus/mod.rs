//! Tokenization, vocabulary, JSONL ingestion, chunking and synthetic corpora.

mod chunk;
mod jsonl;
mod synthetic;
mod vocab;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

pub use chunk::{chunk, chunk_tokens, ChunkConfig, ChunkedDocument};
pub use jsonl::{load_jsonl, read_jsonl, read_label_names, write_jsonl, write_label_names, VocabSource};
pub use synthetic::{gen_synthetic, SyntheticSpec};
pub use vocab::{split_words, Vocab, CLS, PAD, UNK};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    MultiLabel,
    MultiClass,
    Unlabeled,
}

/// One JSONL record: `{"id": str, "text": str, "labels": [int]}`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawDocument {
    pub id: String,
    pub text: String,
    #[serde(default)]
    pub labels: Vec<usize>,
}

/// A tokenized document.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Document {
    pub id: String,
    pub tokens: Vec<usize>,
    pub labels: BTreeSet<usize>,
    pub task: TaskKind,
}

impl Document {
    pub fn new(id: impl Into<String>, tokens: Vec<usize>, labels: BTreeSet<usize>, task: TaskKind) -> Result<Self> {
        let id = id.into();
        if tokens.is_empty() {
            return Err(Error::InvalidArgument(format!("document {id:?} has no tokens")));
        }
        if task == TaskKind::MultiClass && labels.len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "multi-class document {id:?} carries {} labels",
                labels.len()
            )));
        }
        Ok(Self { id, tokens, labels, task })
    }

    /// Tokenizes `raw` with `vocab`.
    pub fn from_raw(raw: &RawDocument, vocab: &Vocab, task: TaskKind) -> Result<Self> {
        Self::new(raw.id.clone(), vocab.tokenize(&raw.text), raw.labels.iter().copied().collect(), task)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// The single label of a multi-class document.
    pub fn class(&self) -> Option<usize> {
        (self.labels.len() == 1).then(|| *self.labels.iter().next().unwrap())
    }
}

/// Splits off the last `fraction` of documents as a test set.
pub fn split_train_test<T: Clone>(items: &[T], test_fraction: f64) -> (Vec<T>, Vec<T>) {
    let n_test = ((items.len() as f64) * test_fraction).round() as usize;
    let cut = items.len() - n_test.min(items.len());
    (items[..cut].to_vec(), items[cut..].to_vec())
}
