//! Fixed-length chunk partitioning with a CLS token per chunk.

use serde::{Deserialize, Serialize};

use super::vocab::{CLS, PAD};
use super::Document;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChunkConfig {
    /// Content tokens per chunk (CLS not counted).
    pub chunk_len: usize,
    pub n_chunks: usize,
    /// Content tokens kept from the start of a document.
    pub max_tokens: usize,
}

impl Default for ChunkConfig {
    fn default() -> Self {
        Self {
            chunk_len: 128,
            n_chunks: 32,
            max_tokens: 4096,
        }
    }
}

impl ChunkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.chunk_len == 0 || self.n_chunks == 0 || self.max_tokens < self.chunk_len {
            return Err(Error::Config(format!(
                "chunking needs chunk_len >= 1, n_chunks >= 1, max_tokens >= chunk_len; got {self:?}"
            )));
        }
        Ok(())
    }

    /// Positions one chunk occupies in the encoder.
    pub fn positions(&self) -> usize {
        self.chunk_len + 1
    }

    /// Number of real chunks a document of `len` tokens produces.
    pub fn real_chunks(&self, len: usize) -> usize {
        len.min(self.max_tokens).div_ceil(self.chunk_len).min(self.n_chunks)
    }
}

/// A document laid out as `n_chunks` slots of `chunk_len + 1` token ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChunkedDocument {
    pub doc_id: String,
    /// `n_chunks` rows of `chunk_len + 1` ids; real rows start with CLS.
    pub chunks: Vec<Vec<usize>>,
    /// `true` for slots holding document content.
    pub chunk_mask: Vec<bool>,
    /// `true` for CLS and content positions.
    pub token_mask: Vec<Vec<bool>>,
}

impl ChunkedDocument {
    pub fn n_slots(&self) -> usize {
        self.chunks.len()
    }

    pub fn real_chunks(&self) -> usize {
        self.chunk_mask.iter().filter(|&&m| m).count()
    }

    /// Indices of real chunk slots.
    pub fn real_indices(&self) -> Vec<usize> {
        (0..self.chunks.len()).filter(|&i| self.chunk_mask[i]).collect()
    }

    /// Content tokens of slot `i`, without CLS or padding.
    pub fn content(&self, i: usize) -> Vec<usize> {
        self.chunks[i]
            .iter()
            .zip(&self.token_mask[i])
            .skip(1)
            .filter(|(_, &m)| m)
            .map(|(&t, _)| t)
            .collect()
    }

    /// Concatenated content of all unmasked slots in order.
    pub fn content_tokens(&self) -> Vec<usize> {
        self.real_indices().into_iter().flat_map(|i| self.content(i)).collect()
    }

    /// Marks slot `i` as padding: ids become PAD and masks false.
    pub fn mask_slot(&mut self, i: usize) {
        self.chunks[i].iter_mut().for_each(|t| *t = PAD);
        self.token_mask[i].iter_mut().for_each(|m| *m = false);
        self.chunk_mask[i] = false;
    }
}

/// Truncates to `max_tokens`, splits into consecutive `chunk_len` spans,
/// prepends CLS to each, and pads to `n_chunks` slots.
pub fn chunk(doc: &Document, config: &ChunkConfig) -> ChunkedDocument {
    chunk_tokens(&doc.id, &doc.tokens, config)
}

pub fn chunk_tokens(doc_id: &str, tokens: &[usize], config: &ChunkConfig) -> ChunkedDocument {
    let width = config.positions();
    let kept = &tokens[..tokens.len().min(config.max_tokens)];
    let mut chunks = vec![vec![PAD; width]; config.n_chunks];
    let mut token_mask = vec![vec![false; width]; config.n_chunks];
    let mut chunk_mask = vec![false; config.n_chunks];
    for (slot, span) in kept.chunks(config.chunk_len).take(config.n_chunks).enumerate() {
        chunks[slot][0] = CLS;
        token_mask[slot][0] = true;
        chunks[slot][1..=span.len()].copy_from_slice(span);
        token_mask[slot][1..=span.len()].iter_mut().for_each(|m| *m = true);
        chunk_mask[slot] = true;
    }
    ChunkedDocument {
        doc_id: doc_id.to_owned(),
        chunks,
        chunk_mask,
        token_mask,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::TaskKind;
    use proptest::prelude::*;

    fn doc(len: usize) -> Document {
        Document::new("d", (0..len).map(|i| 3 + i % 50).collect(), Default::default(), TaskKind::Unlabeled).unwrap()
    }

    #[test]
    fn three_hundred_tokens() {
        let c = chunk(&doc(300), &ChunkConfig::default());
        assert_eq!(c.real_chunks(), 3);
        assert_eq!(c.n_slots(), 32);
        assert_eq!(c.content(0).len(), 128);
        assert_eq!(c.content(1).len(), 128);
        assert_eq!(c.content(2).len(), 44);
        assert_eq!(c.chunks[2][45..].iter().filter(|&&t| t == PAD).count(), 129 - 45);
        assert_eq!(c.chunk_mask.iter().filter(|&&m| !m).count(), 29);
    }

    #[test]
    fn long_documents_are_capped() {
        let d = doc(5000);
        let c = chunk(&d, &ChunkConfig::default());
        assert_eq!(c.real_chunks(), 32);
        assert_eq!(c.content_tokens(), d.tokens[..4096]);
    }

    #[test]
    fn short_document_single_chunk() {
        let cfg = ChunkConfig {
            n_chunks: 16,
            ..Default::default()
        };
        let c = chunk(&doc(10), &cfg);
        assert_eq!(c.real_chunks(), 1);
        assert_eq!(c.chunks[0][0], CLS);
        assert_eq!(c.chunks[0][11..].len(), 118);
        assert!(c.chunks[0][11..].iter().all(|&t| t == PAD));
        assert_eq!(c.chunk_mask.iter().filter(|&&m| !m).count(), 15);
    }

    #[test]
    fn config_validation() {
        assert!(ChunkConfig { chunk_len: 0, ..Default::default() }.validate().is_err());
        assert!(ChunkConfig { max_tokens: 64, ..Default::default() }.validate().is_err());
        assert!(ChunkConfig::default().validate().is_ok());
    }

    proptest! {
        #[test]
        fn content_round_trips(
            tokens in prop::collection::vec(3usize..500, 1..400),
            chunk_len in 1usize..40,
            n_chunks in 1usize..12,
            extra in 0usize..200,
        ) {
            let cfg = ChunkConfig { chunk_len, n_chunks, max_tokens: chunk_len + extra };
            let c = chunk_tokens("p", &tokens, &cfg);
            let kept = tokens.len().min(cfg.max_tokens).min(chunk_len * n_chunks);
            prop_assert_eq!(c.content_tokens(), tokens[..kept].to_vec());
            prop_assert_eq!(c.real_chunks(), cfg.real_chunks(tokens.len()));
            prop_assert_eq!(
                c.real_chunks(),
                (tokens.len().min(cfg.max_tokens)).div_ceil(chunk_len).min(n_chunks)
            );
            for (i, row) in c.chunks.iter().enumerate() {
                prop_assert_eq!(row.len(), chunk_len + 1);
                prop_assert_eq!(row[0] == CLS, c.chunk_mask[i]);
                for (t, m) in row.iter().zip(&c.token_mask[i]) {
                    if !m { prop_assert_eq!(*t, PAD); }
                }
            }
        }
    }
}
