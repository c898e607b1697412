//! Chunk-to-document aggregation: mean and max pooling over real chunks,
//! and a trainable transformer over chunk vectors.

use std::fmt;
use std::str::FromStr;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{ChunkedDocument, Document, CLS};
use crate::encoders::{Encoder, EncoderConfig, KeyPattern, Mode, StackIds, INIT_STD};
use crate::error::{Error, Result};
use crate::tensor::{Bound, ParamId, ParamSet, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PoolingKind {
    Mean,
    Max,
    Transformer,
}

impl FromStr for PoolingKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Self::Mean),
            "max" => Ok(Self::Max),
            "transformer" => Ok(Self::Transformer),
            _ => Err(Error::Config(format!("unknown pooling {s:?} (mean|max|transformer)"))),
        }
    }
}

impl fmt::Display for PoolingKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Mean => "mean",
            Self::Max => "max",
            Self::Transformer => "transformer",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub pooling: PoolingKind,
    /// Identifier of the encoder weights, e.g. a checkpoint digest or `random-init:<seed>`.
    pub encoder: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DocEmbedding {
    pub vector: Vec<f64>,
    pub doc_id: String,
    pub provenance: Provenance,
}

fn check_chunks(chunks: &[Vec<f64>], mask: &[bool]) -> Result<usize> {
    if chunks.len() != mask.len() {
        return Err(Error::InvalidArgument(format!(
            "{} chunks with {} mask entries",
            chunks.len(),
            mask.len()
        )));
    }
    let first = mask
        .iter()
        .position(|&m| m)
        .ok_or_else(|| Error::InvalidArgument("pooling needs at least one unmasked chunk".into()))?;
    let dim = chunks[first].len();
    if chunks.iter().zip(mask).any(|(c, &m)| m && c.len() != dim) {
        return Err(Error::InvalidArgument("chunk vectors differ in length".into()));
    }
    Ok(dim)
}

/// Mean over unmasked chunks; masked slots count in neither sum nor divisor.
pub fn pool_mean(chunks: &[Vec<f64>], mask: &[bool]) -> Result<Vec<f64>> {
    let dim = check_chunks(chunks, mask)?;
    let mut out = vec![0.0; dim];
    let mut n = 0.0;
    for c in chunks.iter().zip(mask).filter(|(_, &m)| m).map(|(c, _)| c) {
        out.iter_mut().zip(c).for_each(|(o, x)| *o += x);
        n += 1.0;
    }
    out.iter_mut().for_each(|o| *o /= n);
    Ok(out)
}

/// Elementwise max over unmasked chunks.
pub fn pool_max(chunks: &[Vec<f64>], mask: &[bool]) -> Result<Vec<f64>> {
    let dim = check_chunks(chunks, mask)?;
    let mut out = vec![f64::NEG_INFINITY; dim];
    for c in chunks.iter().zip(mask).filter(|(_, &m)| m).map(|(c, _)| c) {
        out.iter_mut().zip(c).for_each(|(o, &x)| *o = o.max(x));
    }
    Ok(out)
}

/// Mean or max pooling of stacked chunk vectors (`n x dim`) on a tape.
pub fn pool_var<'t>(kind: PoolingKind, chunks: Var<'t>, mask: &[bool]) -> Result<Var<'t>> {
    match kind {
        PoolingKind::Mean => chunks.mean_rows(mask),
        PoolingKind::Max => chunks.max_rows(mask),
        PoolingKind::Transformer => Err(Error::InvalidArgument(
            "transformer pooling needs an aggregator".into(),
        )),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregatorConfig {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub max_chunks: usize,
    pub dropout: f64,
}

impl AggregatorConfig {
    /// Two layers with the encoder's block sizes.
    pub fn for_encoder(encoder: &EncoderConfig, max_chunks: usize) -> Self {
        Self {
            dim: encoder.dim,
            layers: 2,
            heads: encoder.heads,
            ff_dim: encoder.ff_dim,
            max_chunks,
            dropout: encoder.dropout,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.layers == 0 || self.ff_dim == 0 || self.max_chunks == 0 {
            return Err(Error::Config(format!("aggregator sizes must be positive: {self:?}")));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "aggregator dim {} not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("aggregator dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

const PREFIX: &str = "aggregator.";

/// Transformer over chunk vectors with learned chunk-position embeddings;
/// the document vector is the max over contextualized real chunks.
#[derive(Clone, Debug)]
pub struct Aggregator {
    config: AggregatorConfig,
    params: ParamSet,
    pos: ParamId,
    stack: StackIds,
}

impl Aggregator {
    pub fn init(config: AggregatorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let pos = params.add(
            format!("{PREFIX}chunk_pos"),
            Tensor::truncated_normal(config.max_chunks, config.dim, INIT_STD, &mut rng),
        );
        let stack = StackIds::init(&mut params, PREFIX, config.dim, config.ff_dim, config.layers, &mut rng);
        Ok(Self {
            config,
            params,
            pos,
            stack,
        })
    }

    pub fn from_params(config: AggregatorConfig, params: ParamSet) -> Result<Self> {
        config.validate()?;
        let pos = params.id(&format!("{PREFIX}chunk_pos"))?;
        if params.get(pos).shape() != [config.max_chunks, config.dim] {
            return Err(Error::Checkpoint("aggregator chunk_pos shape does not match config".into()));
        }
        let stack = StackIds::lookup(&params, PREFIX, config.layers)?;
        Ok(Self {
            config,
            params,
            pos,
            stack,
        })
    }

    pub fn config(&self) -> &AggregatorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// `chunks` is `n_slots x dim`; returns `1 x dim`.
    pub fn forward<'t>(&self, bound: &Bound<'t>, chunks: Var<'t>, mask: &[bool], mode: &mut Mode<'_>) -> Result<Var<'t>> {
        let [n, dim] = chunks.shape();
        if dim != self.config.dim || n != mask.len() || n > self.config.max_chunks {
            return Err(Error::shape("aggregate", &[[n, dim], [mask.len(), self.config.max_chunks]]));
        }
        if !mask.contains(&true) {
            return Err(Error::InvalidArgument("pooling needs at least one unmasked chunk".into()));
        }
        let x = chunks.add(bound[self.pos].slice_rows(0, n)?)?;
        let x = mode.dropout(x, self.config.dropout)?;
        let h = self.stack.forward(
            bound,
            x,
            self.config.heads,
            &KeyPattern::Dense { key_mask: mask },
            self.config.dropout,
            mode,
        )?;
        h.max_rows(mask)
    }

    /// Eval-mode document vector from plain chunk vectors.
    pub fn aggregate(&self, chunks: &[Vec<f64>], mask: &[bool]) -> Result<Vec<f64>> {
        let dim = check_chunks(chunks, mask)?;
        let rows: Vec<Vec<f64>> = chunks
            .iter()
            .zip(mask)
            .map(|(c, &m)| if m { c.clone() } else { vec![0.0; dim] })
            .collect();
        let tape = crate::tensor::Tape::new();
        let bound = self.params.bind(&tape, false);
        let x = tape.constant(Tensor::from_rows(&rows)?);
        Ok(self.forward(&bound, x, mask, &mut Mode::Eval)?.value().into_data())
    }
}

/// Chunk-to-document reduction used on a tape.
#[derive(Clone, Copy)]
pub enum Pooler<'a, 't> {
    Mean,
    Max,
    Transformer(&'a Aggregator, &'a Bound<'t>),
}

impl Pooler<'_, '_> {
    pub fn kind(&self) -> PoolingKind {
        match self {
            Pooler::Mean => PoolingKind::Mean,
            Pooler::Max => PoolingKind::Max,
            Pooler::Transformer(..) => PoolingKind::Transformer,
        }
    }
}

/// Document vectors (`N x dim`) for chunked documents, with every real
/// chunk of every document encoded in one packed pass.
pub fn embed_on_tape<'t>(
    encoder: &Encoder,
    bound: &Bound<'t>,
    docs: &[&ChunkedDocument],
    pooler: Pooler<'_, 't>,
    mode: &mut Mode<'_>,
) -> Result<Var<'t>> {
    let mut seqs: Vec<(&[usize], &[bool])> = Vec::new();
    let mut spans = Vec::with_capacity(docs.len());
    for doc in docs {
        let real = doc.real_indices();
        if real.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "document {:?} has no unmasked chunk to pool",
                doc.doc_id
            )));
        }
        spans.push(seqs.len());
        seqs.extend(real.iter().map(|&i| (doc.chunks[i].as_slice(), doc.token_mask[i].as_slice())));
    }
    spans.push(seqs.len());
    let cls = encoder.cls_batch(bound, &seqs, mode)?;
    let tape = cls.tape();
    let pooled = docs
        .iter()
        .enumerate()
        .map(|(d, doc)| {
            let (start, end) = (spans[d], spans[d + 1]);
            match pooler {
                Pooler::Mean | Pooler::Max => {
                    let rows = cls.slice_rows(start, end - start)?;
                    pool_var(pooler.kind(), rows, &vec![true; end - start])
                }
                Pooler::Transformer(agg, agg_bound) => {
                    // One row per slot; masked slots borrow an arbitrary real row.
                    let mut next = start;
                    let ids: Vec<usize> = doc
                        .chunk_mask
                        .iter()
                        .map(|&m| {
                            if m {
                                next += 1;
                                next - 1
                            } else {
                                start
                            }
                        })
                        .collect();
                    let slots = tape.gather(cls, &ids)?;
                    agg.forward(agg_bound, slots, &doc.chunk_mask, mode)
                }
            }
        })
        .collect::<Result<Vec<_>>>()?;
    if pooled.len() == 1 {
        return Ok(pooled[0]);
    }
    tape.concat_rows(&pooled)
}

/// Eval-mode document vectors, computed in parallel and returned in input order.
pub fn embed_documents(
    encoder: &Encoder,
    docs: &[ChunkedDocument],
    pooling: PoolingKind,
    aggregator: Option<&Aggregator>,
) -> Result<Vec<Vec<f64>>> {
    if pooling == PoolingKind::Transformer && aggregator.is_none() {
        return Err(Error::InvalidArgument("transformer pooling needs an aggregator".into()));
    }
    docs.par_iter()
        .map(|doc| {
            let tape = Tape::new();
            let bound = encoder.params().bind(&tape, false);
            let agg_bound = aggregator.map(|a| a.params().bind(&tape, false));
            let pooler = match (pooling, aggregator, &agg_bound) {
                (PoolingKind::Mean, ..) => Pooler::Mean,
                (PoolingKind::Max, ..) => Pooler::Max,
                (PoolingKind::Transformer, Some(a), Some(b)) => Pooler::Transformer(a, b),
                _ => unreachable!(),
            };
            Ok(embed_on_tape(encoder, &bound, &[doc], pooler, &mut Mode::Eval)?.value().into_data())
        })
        .collect()
}

/// Eval-mode CLS vectors of whole documents under sliding-window attention:
/// CLS followed by the first `max_positions - 1` tokens.
pub fn embed_long_documents(encoder: &Encoder, docs: &[Document]) -> Result<Vec<Vec<f64>>> {
    let budget = encoder.config().max_positions - 1;
    docs.par_iter()
        .map(|doc| {
            let mut tokens = vec![CLS];
            tokens.extend(doc.tokens.iter().take(budget));
            let mask = vec![true; tokens.len()];
            Ok(encoder.encode_sparse(&tokens, &mask)?.1)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{objective, GradCheck, Tape};
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::Rng;

    #[test]
    fn mean_and_max_examples() {
        let c = vec![vec![1.0, 3.0], vec![3.0, 1.0]];
        assert_eq!(pool_mean(&c, &[true, true]).unwrap(), [2.0, 2.0]);
        assert_eq!(pool_max(&c, &[true, true]).unwrap(), [3.0, 3.0]);
        assert_eq!(pool_mean(&c, &[false, true]).unwrap(), [3.0, 1.0]);
        assert_eq!(pool_max(&c, &[true, false]).unwrap(), [1.0, 3.0]);
        assert!(pool_mean(&c, &[false, false]).is_err());
        assert!(pool_max(&[], &[]).is_err());
    }

    #[test]
    fn max_absorbs_dominated_chunks() {
        let mut c = vec![vec![1.0, 3.0], vec![3.0, 1.0]];
        let before = pool_max(&c, &[true, true]).unwrap();
        c.push(vec![2.5, -4.0]);
        assert_eq!(pool_max(&c, &[true, true, true]).unwrap(), before);
    }

    #[test]
    fn tape_pooling_matches_plain() {
        let c = vec![vec![1.0, -3.0, 0.5], vec![3.0, 1.0, 0.25], vec![9.0, 9.0, 9.0]];
        let mask = [true, true, false];
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&c).unwrap());
        let mean = pool_var(PoolingKind::Mean, x, &mask).unwrap().value();
        let max = pool_var(PoolingKind::Max, x, &mask).unwrap().value();
        assert_eq!(mean.data(), pool_mean(&c, &mask).unwrap());
        assert_eq!(max.data(), pool_max(&c, &mask).unwrap());
    }

    proptest! {
        #[test]
        fn mean_and_max_ignore_order_and_masked_slots(
            rows in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 3), 2..8),
            seed in any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut mask: Vec<bool> = rows.iter().map(|_| rng.gen_bool(0.7)).collect();
            mask[0] = true;
            let mean = pool_mean(&rows, &mask).unwrap();
            let max = pool_max(&rows, &mask).unwrap();

            let mut order: Vec<usize> = (0..rows.len()).collect();
            order.shuffle(&mut rng);
            let shuffled: Vec<Vec<f64>> = order.iter().map(|&i| rows[i].clone()).collect();
            let shuffled_mask: Vec<bool> = order.iter().map(|&i| mask[i]).collect();
            let m2 = pool_mean(&shuffled, &shuffled_mask).unwrap();
            prop_assert!(mean.iter().zip(&m2).all(|(a, b)| (a - b).abs() < 1e-12));
            prop_assert_eq!(&max, &pool_max(&shuffled, &shuffled_mask).unwrap());

            // Garbage in masked slots changes nothing.
            let garbage: Vec<Vec<f64>> = shuffled
                .iter()
                .zip(&shuffled_mask)
                .map(|(r, &m)| if m { r.clone() } else { vec![1e6; 3] })
                .collect();
            prop_assert_eq!(&m2, &pool_mean(&garbage, &shuffled_mask).unwrap());
        }
    }

    fn agg(seed: u64, dropout: f64) -> Aggregator {
        Aggregator::init(
            AggregatorConfig {
                dim: 8,
                layers: 2,
                heads: 2,
                ff_dim: 12,
                max_chunks: 6,
                dropout,
            },
            seed,
        )
        .unwrap()
    }

    fn random_chunks(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec<f64>> {
        (0..n).map(|_| (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
    }

    #[test]
    fn aggregator_ignores_masked_slots() {
        let a = agg(1, 0.1);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut chunks = random_chunks(&mut rng, 5);
        let mask = [true, false, true, true, false];
        let base = a.aggregate(&chunks, &mask).unwrap();
        chunks[1] = vec![50.0; 8];
        chunks[4] = vec![-7.0; 8];
        let altered = a.aggregate(&chunks, &mask).unwrap();
        assert!(base.iter().zip(&altered).all(|(x, y)| (x - y).abs() < 1e-12));

        // Feeding masked garbage straight onto the tape is equally inert.
        let tape = Tape::new();
        let bound = a.params().bind(&tape, false);
        let x = tape.constant(Tensor::from_rows(&chunks).unwrap());
        let direct = a.forward(&bound, x, &mask, &mut Mode::Eval).unwrap().value();
        assert!(direct.data().iter().zip(&base).all(|(x, y)| (x - y).abs() < 1e-9));
    }

    #[test]
    fn single_chunk_depends_only_on_that_chunk() {
        let a = agg(2, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut chunks = random_chunks(&mut rng, 4);
        let mask = [false, false, true, false];
        let first = a.aggregate(&chunks, &mask).unwrap();
        chunks[0] = vec![3.0; 8];
        assert_eq!(first, a.aggregate(&chunks, &mask).unwrap());
        assert!(a.aggregate(&chunks, &[false; 4]).is_err());
    }

    #[test]
    fn aggregator_is_order_sensitive() {
        let a = agg(3, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let chunks = random_chunks(&mut rng, 3);
        let reversed: Vec<Vec<f64>> = chunks.iter().rev().cloned().collect();
        let x = a.aggregate(&chunks, &[true; 3]).unwrap();
        let y = a.aggregate(&reversed, &[true; 3]).unwrap();
        let diff = x.iter().zip(&y).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
        assert!(diff > 1e-6, "{diff}");
    }

    #[test]
    fn aggregator_gradients_match_finite_differences() {
        let mut a = agg(4, 0.0);
        for t in a.params_mut().tensors_mut() {
            if t.rows() > 1 {
                t.scale_in_place(10.0);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let chunks = Tensor::from_rows(&random_chunks(&mut rng, 4)).unwrap();
        let mask = [true, true, false, true];
        let probe = Tensor::truncated_normal(1, 8, 1.0, &mut rng);
        let model = a.clone();
        let f = objective(move |tape, bound| {
            let x = tape.constant(chunks.clone());
            let p = tape.constant(probe.clone());
            model.forward(bound, x, &mask, &mut Mode::Eval)?.mul(p)?.sum()
        });
        let err = GradCheck {
            eps: 1e-5,
            samples: Some(200),
            seed: 4,
        }
        .run(a.params(), f)
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn pooling_names_parse() {
        for kind in [PoolingKind::Mean, PoolingKind::Max, PoolingKind::Transformer] {
            assert_eq!(kind.to_string().parse::<PoolingKind>().unwrap(), kind);
        }
        assert!("sum".parse::<PoolingKind>().is_err());
    }

    #[test]
    fn document_embeddings_match_chunkwise_pooling() {
        use crate::corpus::{chunk_tokens, ChunkConfig, CLS};
        use crate::encoders::AttentionMode;
        let enc = Encoder::init(
            EncoderConfig {
                vocab_size: 30,
                dim: 8,
                layers: 1,
                heads: 2,
                ff_dim: 8,
                max_positions: 6,
                dropout: 0.1,
                attention: AttentionMode::Dense,
            },
            1,
        )
        .unwrap();
        let cfg = ChunkConfig {
            chunk_len: 5,
            n_chunks: 6,
            max_tokens: 30,
        };
        let docs: Vec<ChunkedDocument> = [7usize, 13, 22]
            .iter()
            .map(|&n| chunk_tokens("d", &(0..n).map(|i| 3 + i % 27).collect::<Vec<_>>(), &cfg))
            .collect();
        let a = agg(5, 0.1);
        for pooling in [PoolingKind::Mean, PoolingKind::Max, PoolingKind::Transformer] {
            let got = embed_documents(&enc, &docs, pooling, Some(&a)).unwrap();
            for (doc, v) in docs.iter().zip(&got) {
                let chunks: Vec<Vec<f64>> = (0..doc.n_slots())
                    .map(|i| {
                        if doc.chunk_mask[i] {
                            assert_eq!(doc.chunks[i][0], CLS);
                            enc.encode_chunk(&doc.chunks[i], &doc.token_mask[i]).unwrap()
                        } else {
                            vec![0.0; 8]
                        }
                    })
                    .collect();
                let want = match pooling {
                    PoolingKind::Mean => pool_mean(&chunks, &doc.chunk_mask).unwrap(),
                    PoolingKind::Max => pool_max(&chunks, &doc.chunk_mask).unwrap(),
                    PoolingKind::Transformer => a.aggregate(&chunks, &doc.chunk_mask).unwrap(),
                };
                assert!(v.iter().zip(&want).all(|(x, y)| (x - y).abs() < 1e-10), "{pooling}");
            }
        }
    }

    #[test]
    fn long_documents_are_cut_to_the_position_budget() {
        let cfg = EncoderConfig {
            vocab_size: 30,
            dim: 8,
            layers: 1,
            heads: 2,
            ff_dim: 12,
            max_positions: 9,
            dropout: 0.0,
            attention: crate::encoders::AttentionMode::sliding(2),
        };
        let enc = Encoder::init(cfg, 4).unwrap();
        let doc = |n: usize| Document::new("d", (0..n).map(|i| 3 + i % 20).collect(), Default::default(), crate::corpus::TaskKind::Unlabeled).unwrap();
        let got = embed_long_documents(&enc, &[doc(8), doc(30), doc(3)]).unwrap();
        assert_eq!(got[0], got[1]);
        let mut tokens = vec![CLS];
        tokens.extend(3..6);
        assert_eq!(got[2], enc.encode_sparse(&tokens, &[true; 4]).unwrap().1);
        let dense = Encoder::from_params(EncoderConfig { attention: crate::encoders::AttentionMode::Dense, ..enc.config().clone() }, enc.params().clone()).unwrap();
        assert!(embed_long_documents(&dense, &[doc(3)]).is_err());
    }
}
