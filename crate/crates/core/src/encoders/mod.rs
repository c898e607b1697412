//! Transformer encoders exposing a CLS representation.
//!
//! One parameter layout serves two attention routes: dense attention for
//! short chunks, and sliding-window attention with global positions for
//! long sequences. The dense route is built from primitive tape ops and
//! doubles as the reference for the banded kernel.

mod block;
mod config;

use rand::RngCore;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub(crate) use block::{KeyPattern, StackIds, INIT_STD};
pub use block::sliding_rows;
pub use config::{AttentionMode, EncoderConfig};

use crate::corpus::{ChunkedDocument, CLS};
use crate::error::{Error, Result};
use crate::tensor::{AttentionRows, Bound, ParamId, ParamSet, Tape, Tensor, Var};

/// Train mode applies dropout with the supplied RNG; eval mode does not.
pub enum Mode<'r> {
    Eval,
    Train(&'r mut dyn RngCore),
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }

    pub(crate) fn dropout<'t>(&mut self, x: Var<'t>, p: f64) -> Result<Var<'t>> {
        match self {
            Mode::Train(rng) => x.dropout(p, &mut **rng),
            Mode::Eval => Ok(x),
        }
    }
}

pub const INIT_DESCRIPTION: &str = "truncated normal (std 0.02, cut at 2 std) for weight matrices and embeddings; \
layer-norm gamma 1, beta 0; biases 0";

/// CLS output for one chunk of a document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChunkEmbedding {
    pub vector: Vec<f64>,
    pub doc_id: String,
    pub chunk_index: usize,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    config: EncoderConfig,
    params: ParamSet,
    tok: ParamId,
    pos: ParamId,
    stack: StackIds,
}

pub(crate) const PREFIX: &str = "encoder.";

impl Encoder {
    /// Fresh weights, deterministic in `seed`.
    pub fn init(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let tok = params.add(
            format!("{PREFIX}tok_emb"),
            Tensor::truncated_normal(config.vocab_size, config.dim, INIT_STD, &mut rng),
        );
        let pos = params.add(
            format!("{PREFIX}pos_emb"),
            Tensor::truncated_normal(config.max_positions, config.dim, INIT_STD, &mut rng),
        );
        let stack = StackIds::init(&mut params, PREFIX, config.dim, config.ff_dim, config.layers, &mut rng);
        Ok(Self {
            config,
            params,
            tok,
            pos,
            stack,
        })
    }

    /// Rebuilds an encoder around existing parameters (e.g. from a checkpoint).
    /// Parameters outside the encoder namespace are ignored.
    pub fn from_params(config: EncoderConfig, params: ParamSet) -> Result<Self> {
        config.validate()?;
        let tok = params.id(&format!("{PREFIX}tok_emb"))?;
        let pos = params.id(&format!("{PREFIX}pos_emb"))?;
        let expect = |id: ParamId, shape: [usize; 2]| {
            let got = params.get(id).shape();
            if got != shape {
                return Err(Error::Checkpoint(format!(
                    "{} has shape {got:?}, config expects {shape:?}",
                    params.name(id)
                )));
            }
            Ok(())
        };
        expect(tok, [config.vocab_size, config.dim])?;
        expect(pos, [config.max_positions, config.dim])?;
        let stack = StackIds::lookup(&params, PREFIX, config.layers)?;
        Ok(Self {
            config,
            params,
            tok,
            pos,
            stack,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn into_params(self) -> ParamSet {
        self.params
    }

    /// Same weights under a different attention route.
    pub fn with_attention(&self, attention: AttentionMode) -> Result<Self> {
        let config = EncoderConfig {
            attention,
            ..self.config.clone()
        };
        Self::from_params(config, self.params.clone())
    }

    fn check_input(&self, tokens: &[usize], mask: &[bool]) -> Result<()> {
        if tokens.is_empty() || tokens.len() != mask.len() {
            return Err(Error::InvalidArgument(format!(
                "{} tokens with {} mask entries",
                tokens.len(),
                mask.len()
            )));
        }
        if tokens[0] != CLS || !mask[0] {
            return Err(Error::InvalidArgument("sequence must start with an unmasked CLS".into()));
        }
        if tokens.len() > self.config.max_positions {
            return Err(Error::InvalidArgument(format!(
                "sequence of {} positions exceeds max positions {}",
                tokens.len(),
                self.config.max_positions
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::InvalidArgument(format!(
                "token id {bad} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    /// Final-layer hidden states (`L x dim`) using the configured attention.
    /// `bound` must come from binding this encoder's parameters.
    pub fn hidden<'t>(&self, bound: &Bound<'t>, tokens: &[usize], mask: &[bool], mode: &mut Mode<'_>) -> Result<Var<'t>> {
        self.check_input(tokens, mask)?;
        let tape = bound[self.tok].tape();
        let x = tape
            .gather(bound[self.tok], tokens)?
            .add(bound[self.pos].slice_rows(0, tokens.len())?)?;
        let x = mode.dropout(x, self.config.dropout)?;
        let c = &self.config;
        match &c.attention {
            AttentionMode::Dense => {
                self.stack
                    .forward(bound, x, c.heads, &KeyPattern::Dense { key_mask: mask }, c.dropout, mode)
            }
            AttentionMode::Sliding { window, global } => {
                let rows = sliding_rows(tokens.len(), *window, global, mask);
                self.stack.forward(bound, x, c.heads, &KeyPattern::Rows(&rows), c.dropout, mode)
            }
        }
    }

    /// Position-0 hidden state (`1 x dim`). Trailing masked positions are
    /// dropped before the forward pass; they cannot influence the result.
    pub fn cls<'t>(&self, bound: &Bound<'t>, tokens: &[usize], mask: &[bool], mode: &mut Mode<'_>) -> Result<Var<'t>> {
        let len = mask.iter().rposition(|&m| m).map_or(tokens.len(), |p| p + 1);
        let (tokens, mask) = (&tokens[..len.min(tokens.len())], &mask[..len.min(mask.len())]);
        self.hidden(bound, tokens, mask, mode)?.slice_rows(0, 1)
    }

    /// CLS vectors (`n x dim`) of `n` independent sequences in one pass.
    ///
    /// Sequences are packed end to end and attention is restricted to keys
    /// of the same sequence, so row `i` equals [`Encoder::cls`] on sequence
    /// `i` alone. Trailing masked positions are dropped.
    pub fn cls_batch<'t>(&self, bound: &Bound<'t>, seqs: &[(&[usize], &[bool])], mode: &mut Mode<'_>) -> Result<Var<'t>> {
        if seqs.is_empty() {
            return Err(Error::InvalidArgument("cls_batch needs at least one sequence".into()));
        }
        let mut tokens = Vec::new();
        let mut positions = Vec::new();
        let mut keys = Vec::new();
        let mut cls_rows = Vec::with_capacity(seqs.len());
        for &(t, m) in seqs {
            let len = m.iter().rposition(|&x| x).map_or(t.len(), |p| p + 1).min(t.len());
            let (t, m) = (&t[..len], &m[..len]);
            self.check_input(t, m)?;
            let offset = tokens.len();
            cls_rows.push(offset);
            let rows = match &self.config.attention {
                AttentionMode::Dense => sliding_rows(len, len, &[], m),
                AttentionMode::Sliding { window, global } => sliding_rows(len, *window, global, m),
            };
            keys.extend((0..len).map(|i| rows.keys(i).iter().map(|&j| j + offset).collect::<Vec<_>>()));
            tokens.extend_from_slice(t);
            positions.extend(0..len);
        }
        let tape = bound[self.tok].tape();
        let x = tape
            .gather(bound[self.tok], &tokens)?
            .add(tape.gather(bound[self.pos], &positions)?)?;
        let x = mode.dropout(x, self.config.dropout)?;
        let rows = AttentionRows::new(keys);
        let c = &self.config;
        let h = self.stack.forward(bound, x, c.heads, &KeyPattern::Rows(&rows), c.dropout, mode)?;
        tape.gather(h, &cls_rows)
    }

    /// Eval-mode CLS vector of one chunk.
    pub fn encode_chunk(&self, tokens: &[usize], mask: &[bool]) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let bound = self.params.bind(&tape, false);
        let v = self.cls_batch(&bound, &[(tokens, mask)], &mut Mode::Eval)?;
        Ok(v.value().into_data())
    }

    /// Eval-mode CLS vectors of every real chunk of `doc`.
    pub fn encode_document(&self, doc: &ChunkedDocument) -> Result<Vec<ChunkEmbedding>> {
        let real = doc.real_indices();
        if real.is_empty() {
            return Ok(Vec::new());
        }
        let tape = Tape::new();
        let bound = self.params.bind(&tape, false);
        let seqs: Vec<(&[usize], &[bool])> = real
            .iter()
            .map(|&i| (doc.chunks[i].as_slice(), doc.token_mask[i].as_slice()))
            .collect();
        let cls = self.cls_batch(&bound, &seqs, &mut Mode::Eval)?.value();
        Ok(real
            .iter()
            .enumerate()
            .map(|(r, &i)| ChunkEmbedding {
                vector: cls.row(r).to_vec(),
                doc_id: doc.doc_id.clone(),
                chunk_index: i,
            })
            .collect())
    }

    /// Eval-mode sliding-window encoding: full hidden sequence and CLS vector.
    pub fn encode_sparse(&self, tokens: &[usize], mask: &[bool]) -> Result<(Tensor, Vec<f64>)> {
        if !matches!(self.config.attention, AttentionMode::Sliding { .. }) {
            return Err(Error::Config("encode_sparse needs sliding attention".into()));
        }
        let tape = Tape::new();
        let bound = self.params.bind(&tape, false);
        let h = self.hidden(&bound, tokens, mask, &mut Mode::Eval)?.value();
        let cls = h.row(0).to_vec();
        Ok((h, cls))
    }
}
