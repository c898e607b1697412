//! Self-supervised pretraining: chunk prediction on the hierarchical and
//! sliding-window paths, plus dropout (SimCSE) and word-repetition
//! (ESimCSE) baselines, all optimized with the multiple-negatives ranking
//! loss over in-batch negatives.

mod loss;
mod pairs;

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use loss::{mnr_loss, mnr_loss_value};
pub use pairs::{esimcse_augment, sample_pair_hier, sample_pair_long, Anchor, CpePair};

use crate::corpus::{chunk, chunk_tokens, ChunkConfig, ChunkedDocument, Document};
use crate::encoders::{AttentionMode, Encoder, Mode};
use crate::error::{Error, Result};
use crate::pooling::{embed_documents, embed_on_tape, Pooler, PoolingKind};
use crate::tensor::{AdamW, AdamWConfig, Bound, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    CpeHier,
    CpeLong,
    Simcse,
    Esimcse,
}

impl FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cpe-hier" => Ok(Self::CpeHier),
            "cpe-long" => Ok(Self::CpeLong),
            "simcse" => Ok(Self::Simcse),
            "esimcse" => Ok(Self::Esimcse),
            _ => Err(Error::Config(format!(
                "unknown objective {s:?} (cpe-hier|cpe-long|simcse|esimcse)"
            ))),
        }
    }
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::CpeHier => "cpe-hier",
            Self::CpeLong => "cpe-long",
            Self::Simcse => "simcse",
            Self::Esimcse => "esimcse",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub objective: Objective,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub temperature: f64,
    pub chunk: ChunkConfig,
    pub esimcse_rate: f64,
    /// Chunk pooling for anchors and document views (mean or max).
    pub pooling: PoolingKind,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            objective: Objective::CpeHier,
            epochs: 3,
            batch_size: 4,
            lr: 2e-5,
            weight_decay: 0.001,
            temperature: 0.05,
            chunk: ChunkConfig::default(),
            esimcse_rate: 0.15,
            pooling: PoolingKind::Mean,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.chunk.validate()?;
        self.optimizer().validate()?;
        let fail = |m: &str| Err(Error::Config(format!("pretrain: {m}")));
        if self.batch_size < 2 {
            return fail("batch_size must be at least 2 (in-batch negatives)");
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return fail("temperature must be positive");
        }
        if !(0.0..=1.0).contains(&self.esimcse_rate) {
            return fail("esimcse_rate must lie in [0, 1]");
        }
        if self.pooling == PoolingKind::Transformer {
            return fail("pooling must be mean or max");
        }
        Ok(())
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }

    fn pooler(&self) -> Pooler<'static, 'static> {
        match self.pooling {
            PoolingKind::Max => Pooler::Max,
            _ => Pooler::Mean,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub objective: Objective,
    pub loss: f64,
}

impl fmt::Display for StepLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}\t{}\t{}\t{}", self.step, self.epoch, self.objective, self.loss)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub steps: Vec<StepLog>,
    /// Documents excluded because they are too short for the objective.
    pub skipped: usize,
    pub used: usize,
    /// Batches where some negative scored at least as high as its anchor's positive.
    pub hard_negative_batches: usize,
}

impl PretrainReport {
    /// Mean step loss of a 1-based epoch.
    pub fn epoch_mean(&self, epoch: usize) -> Option<f64> {
        let losses: Vec<f64> = self.steps.iter().filter(|s| s.epoch == epoch).map(|s| s.loss).collect();
        (!losses.is_empty()).then(|| losses.iter().sum::<f64>() / losses.len() as f64)
    }
}

/// Anchor and candidate embeddings for hierarchical chunk prediction:
/// anchors pool the remaining chunks, candidates are the held-out chunks,
/// both through the same encoder.
pub fn forward_cpe_hier<'t>(
    encoder: &Encoder,
    bound: &Bound<'t>,
    pairs: &[CpePair],
    pooling: PoolingKind,
    mode: &mut Mode<'_>,
) -> Result<(Var<'t>, Var<'t>)> {
    let anchors: Vec<&ChunkedDocument> = pairs
        .iter()
        .map(|p| match &p.anchor {
            Anchor::Chunks(d) => Ok(d),
            Anchor::Reference(_) => Err(Error::InvalidArgument("hierarchical pass got a reference-text pair".into())),
        })
        .collect::<Result<_>>()?;
    let pooler = match pooling {
        PoolingKind::Mean => Pooler::Mean,
        PoolingKind::Max => Pooler::Max,
        PoolingKind::Transformer => return Err(Error::InvalidArgument("pretraining pools with mean or max".into())),
    };
    let a = embed_on_tape(encoder, bound, &anchors, pooler, mode)?;
    let c = encode_positives(encoder, bound, pairs, mode)?;
    Ok((a, c))
}

/// Anchor and candidate embeddings for the sliding-window path: CLS of the
/// reference text and CLS of the held-out span, through the same encoder.
pub fn forward_cpe_long<'t>(
    encoder: &Encoder,
    bound: &Bound<'t>,
    pairs: &[CpePair],
    mode: &mut Mode<'_>,
) -> Result<(Var<'t>, Var<'t>)> {
    let refs: Vec<&[usize]> = pairs
        .iter()
        .map(|p| match &p.anchor {
            Anchor::Reference(r) => Ok(r.as_slice()),
            Anchor::Chunks(_) => Err(Error::InvalidArgument("sliding-window pass got a chunked pair".into())),
        })
        .collect::<Result<_>>()?;
    let masks: Vec<Vec<bool>> = refs.iter().map(|r| vec![true; r.len()]).collect();
    let seqs: Vec<(&[usize], &[bool])> = refs.iter().zip(&masks).map(|(r, m)| (*r, m.as_slice())).collect();
    let a = encoder.cls_batch(bound, &seqs, mode)?;
    let c = encode_positives(encoder, bound, pairs, mode)?;
    Ok((a, c))
}

fn encode_positives<'t>(encoder: &Encoder, bound: &Bound<'t>, pairs: &[CpePair], mode: &mut Mode<'_>) -> Result<Var<'t>> {
    let masks: Vec<Vec<bool>> = pairs.iter().map(|p| vec![true; p.positive.len()]).collect();
    let seqs: Vec<(&[usize], &[bool])> = pairs
        .iter()
        .zip(&masks)
        .map(|(p, m)| (p.positive.as_slice(), m.as_slice()))
        .collect();
    encoder.cls_batch(bound, &seqs, mode)
}

/// Two train-mode passes over the same documents; independent dropout
/// masks make the two views differ.
pub fn forward_simcse<'t>(
    encoder: &Encoder,
    bound: &Bound<'t>,
    docs: &[&ChunkedDocument],
    pooling: PoolingKind,
    mode: &mut Mode<'_>,
) -> Result<(Var<'t>, Var<'t>)> {
    let pooler = match pooling {
        PoolingKind::Max => Pooler::Max,
        _ => Pooler::Mean,
    };
    let a = embed_on_tape(encoder, bound, docs, pooler, mode)?;
    let b = embed_on_tape(encoder, bound, docs, pooler, mode)?;
    Ok((a, b))
}

/// Original documents against their word-repetition views.
pub fn forward_esimcse<'t, R: Rng + ?Sized>(
    encoder: &Encoder,
    bound: &Bound<'t>,
    docs: &[&ChunkedDocument],
    config: &PretrainConfig,
    rng: &mut R,
    mode: &mut Mode<'_>,
) -> Result<(Var<'t>, Var<'t>)> {
    let augmented: Vec<ChunkedDocument> = docs
        .iter()
        .map(|d| {
            let tokens = esimcse_augment(&d.content_tokens(), config.esimcse_rate, rng);
            chunk_tokens(&d.doc_id, &tokens, &config.chunk)
        })
        .collect();
    let views: Vec<&ChunkedDocument> = augmented.iter().collect();
    let a = embed_on_tape(encoder, bound, docs, config.pooler(), mode)?;
    let b = embed_on_tape(encoder, bound, &views, config.pooler(), mode)?;
    Ok((a, b))
}

enum Item {
    Chunked(ChunkedDocument),
    Raw(Document),
}

/// Trains `encoder` in place and returns the per-step log.
///
/// `on_step` sees every step as it completes. Too-short documents are
/// skipped and counted; a trailing batch of one document is dropped
/// because it has no negatives.
pub fn pretrain(
    encoder: &mut Encoder,
    docs: &[Document],
    config: &PretrainConfig,
    mut on_step: impl FnMut(&StepLog),
) -> Result<PretrainReport> {
    config.validate()?;
    let budget = match (&encoder.config().attention, config.objective) {
        (AttentionMode::Sliding { .. }, Objective::CpeLong) => encoder.config().max_positions - 1,
        (_, Objective::CpeLong) => {
            return Err(Error::Config("cpe-long needs an encoder with sliding attention".into()));
        }
        _ => 0,
    };
    if config.objective == Objective::CpeLong && config.chunk.chunk_len + 1 > encoder.config().max_positions {
        return Err(Error::Config("chunk_len + 1 exceeds encoder max positions".into()));
    }
    if config.objective != Objective::CpeLong && config.chunk.positions() > encoder.config().max_positions {
        return Err(Error::Config(format!(
            "chunks occupy {} positions but the encoder has {}",
            config.chunk.positions(),
            encoder.config().max_positions
        )));
    }

    let items: Vec<Item> = docs
        .iter()
        .filter_map(|d| match config.objective {
            Objective::CpeLong => (d.len() >= 2 * config.chunk.chunk_len).then(|| Item::Raw(d.clone())),
            Objective::CpeHier => {
                let c = chunk(d, &config.chunk);
                (c.real_chunks() >= 2).then_some(Item::Chunked(c))
            }
            Objective::Simcse | Objective::Esimcse => Some(Item::Chunked(chunk(d, &config.chunk))),
        })
        .collect();
    let mut report = PretrainReport {
        skipped: docs.len() - items.len(),
        used: items.len(),
        ..Default::default()
    };
    if items.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "{} of {} documents are too short for {}; nothing to train on",
            report.skipped,
            docs.len(),
            config.objective
        )));
    }

    let mut order_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mut opt = AdamW::new(config.optimizer(), encoder.params())?;
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut step = 0;
    for epoch in 1..=config.epochs {
        order.shuffle(&mut order_rng);
        for batch in order.chunks(config.batch_size).filter(|b| b.len() >= 2) {
            step += 1;
            let tape = Tape::new();
            let bound = encoder.params().bind(&tape, true);
            let (a, c) = {
                let mut mode = Mode::Train(&mut rng);
                batch_forward(encoder, &bound, &items, batch, config, budget, &mut mode)?
            };
            let loss = mnr_loss(a, c, config.temperature)?;
            let value = loss.item()?;
            if !value.is_finite() {
                let ids: Vec<&str> = batch
                    .iter()
                    .map(|&i| match &items[i] {
                        Item::Chunked(d) => d.doc_id.as_str(),
                        Item::Raw(d) => d.id.as_str(),
                    })
                    .collect();
                return Err(Error::NonFinite(format!(
                    "loss {value} at step {step} (epoch {epoch}, lr {}) on documents {ids:?}",
                    config.lr
                )));
            }
            if has_hard_negative(&a.value(), &c.value()) {
                report.hard_negative_batches += 1;
            }
            let grads = tape.backward(loss)?.for_params(&bound);
            drop(bound);
            opt.step(encoder.params_mut(), &grads)?;
            let log = StepLog {
                step,
                epoch,
                objective: config.objective,
                loss: value,
            };
            on_step(&log);
            report.steps.push(log);
        }
    }
    Ok(report)
}

fn batch_forward<'t>(
    encoder: &Encoder,
    bound: &Bound<'t>,
    items: &[Item],
    batch: &[usize],
    config: &PretrainConfig,
    budget: usize,
    mode: &mut Mode<'_>,
) -> Result<(Var<'t>, Var<'t>)> {
    // Pair sampling and dropout share one stream, consumed in a fixed order.
    let Mode::Train(rng) = mode else {
        return Err(Error::InvalidArgument("pretraining runs in train mode".into()));
    };
    let chunked = || -> Vec<&ChunkedDocument> {
        batch
            .iter()
            .map(|&i| match &items[i] {
                Item::Chunked(d) => d,
                Item::Raw(_) => unreachable!(),
            })
            .collect()
    };
    match config.objective {
        Objective::CpeHier => {
            let pairs: Vec<CpePair> = chunked()
                .into_iter()
                .map(|d| sample_pair_hier(d, &mut **rng).expect("filtered to >= 2 chunks"))
                .collect();
            forward_cpe_hier(encoder, bound, &pairs, config.pooling, mode)
        }
        Objective::CpeLong => {
            let pairs: Vec<CpePair> = batch
                .iter()
                .map(|&i| match &items[i] {
                    Item::Raw(d) => sample_pair_long(d, config.chunk.chunk_len, budget, &mut **rng).expect("filtered"),
                    Item::Chunked(_) => unreachable!(),
                })
                .collect();
            forward_cpe_long(encoder, bound, &pairs, mode)
        }
        Objective::Simcse => forward_simcse(encoder, bound, &chunked(), config.pooling, mode),
        Objective::Esimcse => {
            let docs = chunked();
            let mut aug_rng = ChaCha8Rng::seed_from_u64(rng.next_u64());
            forward_esimcse(encoder, bound, &docs, config, &mut aug_rng, mode)
        }
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn has_hard_negative(a: &crate::tensor::Tensor, c: &crate::tensor::Tensor) -> bool {
    (0..a.rows()).any(|i| {
        let pos = cosine(a.row(i), c.row(i));
        (0..c.rows()).any(|j| j != i && cosine(a.row(i), c.row(j)) >= pos)
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankingReport {
    pub trials: usize,
    pub correct: usize,
    pub accuracy: f64,
}

/// Held-out chunk retrieval: for each document with at least two chunks,
/// remove a random chunk and check whether the pooled remainder is more
/// similar to it than to `group - 1` chunks held out from other documents.
pub fn ranking_accuracy(
    encoder: &Encoder,
    docs: &[Document],
    chunk_config: &ChunkConfig,
    pooling: PoolingKind,
    group: usize,
    seed: u64,
) -> Result<RankingReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pairs: Vec<CpePair> = docs
        .iter()
        .filter_map(|d| sample_pair_hier(&chunk(d, chunk_config), &mut rng))
        .collect();
    if group < 2 || pairs.len() < group {
        return Err(Error::InvalidArgument(format!(
            "ranking needs at least {group} usable documents (got {})",
            pairs.len()
        )));
    }
    let anchors: Vec<ChunkedDocument> = pairs
        .iter()
        .map(|p| match &p.anchor {
            Anchor::Chunks(d) => d.clone(),
            Anchor::Reference(_) => unreachable!(),
        })
        .collect();
    let anchor_vecs = embed_documents(encoder, &anchors, pooling, None)?;
    let positive_vecs: Vec<Vec<f64>> = pairs
        .iter()
        .map(|p| encoder.encode_chunk(&p.positive, &vec![true; p.positive.len()]))
        .collect::<Result<_>>()?;

    let mut correct = 0;
    for (i, anchor) in anchor_vecs.iter().enumerate() {
        let others: Vec<usize> = (0..pairs.len()).filter(|&j| j != i).collect();
        let target = cosine(anchor, &positive_vecs[i]);
        let wins = others
            .choose_multiple(&mut rng, group - 1)
            .all(|&j| cosine(anchor, &positive_vecs[j]) < target);
        correct += usize::from(wins);
    }
    Ok(RankingReport {
        trials: pairs.len(),
        correct,
        accuracy: correct as f64 / pairs.len() as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{gen_synthetic, SyntheticSpec, TaskKind, Vocab, CLS};
    use crate::encoders::EncoderConfig;
    use crate::tensor::{objective, GradCheck};

    fn toy_corpus(n: usize, seed: u64) -> (Vocab, Vec<Document>) {
        let spec = SyntheticSpec {
            num_docs: n,
            min_len: 20,
            max_len: 40,
            vocab_per_topic: 20,
            shared_vocab: 20,
            ..Default::default()
        };
        let raw = gen_synthetic(&spec, seed).unwrap();
        let texts: Vec<&str> = raw.iter().map(|r| r.text.as_str()).collect();
        let vocab = Vocab::build(&texts, 1).unwrap();
        let docs = raw.iter().map(|r| Document::from_raw(r, &vocab, TaskKind::MultiClass).unwrap()).collect();
        (vocab, docs)
    }

    fn toy_encoder(vocab: &Vocab, attention: AttentionMode, dropout: f64) -> Encoder {
        Encoder::init(
            EncoderConfig {
                vocab_size: vocab.len(),
                dim: 16,
                layers: 1,
                heads: 2,
                ff_dim: 16,
                max_positions: 48,
                dropout,
                attention,
            },
            3,
        )
        .unwrap()
    }

    fn toy_config(objective: Objective) -> PretrainConfig {
        PretrainConfig {
            objective,
            epochs: 2,
            lr: 1e-3,
            chunk: ChunkConfig {
                chunk_len: 8,
                n_chunks: 6,
                max_tokens: 48,
            },
            seed: 9,
            ..Default::default()
        }
    }

    #[test]
    fn objective_names_round_trip() {
        for o in [Objective::CpeHier, Objective::CpeLong, Objective::Simcse, Objective::Esimcse] {
            assert_eq!(o.to_string().parse::<Objective>().unwrap(), o);
        }
        assert!("cpe".parse::<Objective>().is_err());
    }

    #[test]
    fn hierarchical_forward_shares_weights_and_is_finite() {
        let (vocab, docs) = toy_corpus(4, 1);
        let mut enc = toy_encoder(&vocab, AttentionMode::Dense, 0.1);
        let cfg = toy_config(Objective::CpeHier);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pairs: Vec<CpePair> = docs
            .iter()
            .map(|d| sample_pair_hier(&chunk(d, &cfg.chunk), &mut rng).unwrap())
            .collect();
        let run = |enc: &Encoder| {
            let tape = Tape::new();
            let bound = enc.params().bind(&tape, false);
            let (a, c) = forward_cpe_hier(enc, &bound, &pairs, PoolingKind::Mean, &mut Mode::Eval).unwrap();
            assert_eq!((a.shape(), c.shape()), ([4, 16], [4, 16]));
            let loss = mnr_loss(a, c, 0.05).unwrap().item().unwrap();
            assert!(loss.is_finite());
            (a.value(), c.value())
        };
        let (a0, c0) = run(&enc);
        // The candidate side equals a stand-alone chunk encoding with the same weights.
        for (i, p) in pairs.iter().enumerate() {
            let v = enc.encode_chunk(&p.positive, &vec![true; p.positive.len()]).unwrap();
            assert!(v.iter().zip(c0.row(i)).all(|(x, y)| (x - y).abs() < 1e-12));
        }
        // One parameter set: perturbing it moves anchors and candidates together.
        let id = enc.params().id("encoder.layer0.attn.wv").unwrap();
        enc.params_mut().get_mut(id).scale_in_place(3.0);
        let (a1, c1) = run(&enc);
        assert!(a0.max_abs_diff(&a1) > 1e-6 && c0.max_abs_diff(&c1) > 1e-6);
    }

    fn scaled(mut enc: Encoder) -> Encoder {
        for t in enc.params_mut().tensors_mut() {
            if t.rows() > 1 {
                t.scale_in_place(10.0);
            }
        }
        enc
    }

    #[test]
    fn hierarchical_gradients_match_finite_differences() {
        let (vocab, docs) = toy_corpus(3, 2);
        let enc = scaled(toy_encoder(&vocab, AttentionMode::Dense, 0.0));
        let cfg = toy_config(Objective::CpeHier);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pairs: Vec<CpePair> = docs
            .iter()
            .map(|d| sample_pair_hier(&chunk(d, &cfg.chunk), &mut rng).unwrap())
            .collect();
        let model = enc.clone();
        let f = objective(move |_, bound| {
            let (a, c) = forward_cpe_hier(&model, bound, &pairs, PoolingKind::Mean, &mut Mode::Eval)?;
            mnr_loss(a, c, 0.5)
        });
        let err = GradCheck { eps: 1e-5, samples: Some(150), seed: 2 }.run(enc.params(), f).unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn long_forward_shares_weights_and_gradients_check() {
        let (vocab, docs) = toy_corpus(3, 3);
        let enc = scaled(toy_encoder(&vocab, AttentionMode::sliding(3), 0.0));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pairs: Vec<CpePair> = docs.iter().map(|d| sample_pair_long(d, 8, 47, &mut rng).unwrap()).collect();
        {
            let tape = Tape::new();
            let bound = enc.params().bind(&tape, false);
            let (a, c) = forward_cpe_long(&enc, &bound, &pairs, &mut Mode::Eval).unwrap();
            for (i, p) in pairs.iter().enumerate() {
                let Anchor::Reference(r) = &p.anchor else { panic!() };
                let (_, cls) = enc.encode_sparse(r, &vec![true; r.len()]).unwrap();
                assert!(cls.iter().zip(a.value().row(i)).all(|(x, y)| (x - y).abs() < 1e-10));
                let (_, pos) = enc.encode_sparse(&p.positive, &vec![true; p.positive.len()]).unwrap();
                assert!(pos.iter().zip(c.value().row(i)).all(|(x, y)| (x - y).abs() < 1e-10));
            }
            assert!(mnr_loss(a, c, 0.05).unwrap().item().unwrap().is_finite());
        }
        let model = enc.clone();
        let f = objective(move |_, bound| {
            let (a, c) = forward_cpe_long(&model, bound, &pairs, &mut Mode::Eval)?;
            mnr_loss(a, c, 0.5)
        });
        let err = GradCheck { eps: 1e-5, samples: Some(150), seed: 3 }.run(enc.params(), f).unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn simcse_views_follow_dropout() {
        let (vocab, docs) = toy_corpus(4, 4);
        let cfg = toy_config(Objective::Simcse);
        let chunked: Vec<ChunkedDocument> = docs.iter().map(|d| chunk(d, &cfg.chunk)).collect();
        let refs: Vec<&ChunkedDocument> = chunked.iter().collect();
        for (dropout, differ) in [(0.0, false), (0.1, true)] {
            let enc = toy_encoder(&vocab, AttentionMode::Dense, dropout);
            let views = |seed| {
                let tape = Tape::new();
                let bound = enc.params().bind(&tape, false);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let (a, b) = forward_simcse(&enc, &bound, &refs, PoolingKind::Mean, &mut Mode::Train(&mut rng)).unwrap();
                (a.value(), b.value())
            };
            let (a, b) = views(5);
            assert_eq!(a.max_abs_diff(&b) > 0.0, differ);
            assert_eq!(views(5), (a, b));
        }
    }

    #[test]
    fn first_step_loss_is_near_log_batch() {
        let (vocab, docs) = toy_corpus(40, 5);
        let mut enc = toy_encoder(&vocab, AttentionMode::Dense, 0.1);
        let report = pretrain(&mut enc, &docs, &toy_config(Objective::CpeHier), |_| {}).unwrap();
        let first = report.steps[0].loss;
        assert!((first - 4f64.ln()).abs() < 0.3, "{first}");
    }

    #[test]
    fn pretraining_is_deterministic_and_logs_steps() {
        let (vocab, docs) = toy_corpus(16, 6);
        for objective in [Objective::CpeHier, Objective::Simcse, Objective::Esimcse] {
            let run = || {
                let mut enc = toy_encoder(&vocab, AttentionMode::Dense, 0.1);
                let mut lines = Vec::new();
                let report = pretrain(&mut enc, &docs, &toy_config(objective), |s| lines.push(s.to_string())).unwrap();
                (enc.params().tensors().to_vec(), report, lines)
            };
            let (p1, r1, lines) = run();
            let (p2, r2, _) = run();
            assert_eq!(p1, p2);
            assert_eq!(r1, r2);
            assert_eq!(r1.steps.len(), 2 * 4);
            assert_eq!(lines[0].split('\t').collect::<Vec<_>>()[..3], ["1", "1", &objective.to_string()[..]]);
        }
    }

    #[test]
    fn long_objective_trains_and_skips_short_documents() {
        let (vocab, mut docs) = toy_corpus(12, 7);
        docs[0].tokens.truncate(15);
        let mut enc = toy_encoder(&vocab, AttentionMode::sliding(4), 0.1);
        let report = pretrain(&mut enc, &docs, &toy_config(Objective::CpeLong), |_| {}).unwrap();
        assert_eq!(report.skipped, 1);
        assert!(report.steps.iter().all(|s| s.loss.is_finite()));
        let mut dense = toy_encoder(&vocab, AttentionMode::Dense, 0.1);
        assert!(pretrain(&mut dense, &docs, &toy_config(Objective::CpeLong), |_| {}).is_err());
    }

    #[test]
    fn all_short_documents_is_an_error() {
        let (vocab, docs) = toy_corpus(4, 8);
        let short: Vec<Document> = docs
            .iter()
            .map(|d| Document::new(d.id.clone(), d.tokens[..5].to_vec(), d.labels.clone(), d.task).unwrap())
            .collect();
        let mut enc = toy_encoder(&vocab, AttentionMode::Dense, 0.1);
        let err = pretrain(&mut enc, &short, &toy_config(Objective::CpeHier), |_| {}).unwrap_err();
        assert!(err.to_string().contains("too short"), "{err}");
    }

    #[test]
    fn nan_loss_aborts_with_diagnostics() {
        let (vocab, docs) = toy_corpus(8, 9);
        let mut enc = toy_encoder(&vocab, AttentionMode::Dense, 0.1);
        let id = enc.params().id("encoder.tok_emb").unwrap();
        enc.params_mut().get_mut(id).data_mut()[CLS * 16] = f64::NAN;
        let err = pretrain(&mut enc, &docs, &toy_config(Objective::CpeHier), |_| {}).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)), "{err}");
    }

    #[test]
    fn overfits_a_single_batch() {
        let (vocab, docs) = toy_corpus(4, 10);
        let mut enc = toy_encoder(&vocab, AttentionMode::Dense, 0.0);
        let cfg = toy_config(Objective::CpeHier);
        // Fixed pairs: the same held-out chunks every step.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pairs: Vec<CpePair> = docs
            .iter()
            .map(|d| sample_pair_hier(&chunk(d, &cfg.chunk), &mut rng).unwrap())
            .collect();
        let mut opt = AdamW::new(AdamWConfig { lr: 1e-3, ..Default::default() }, enc.params()).unwrap();
        let mut last = f64::INFINITY;
        for _ in 0..500 {
            let tape = Tape::new();
            let bound = enc.params().bind(&tape, true);
            let (a, c) = forward_cpe_hier(&enc, &bound, &pairs, PoolingKind::Mean, &mut Mode::Eval).unwrap();
            let loss = mnr_loss(a, c, 0.05).unwrap();
            last = loss.item().unwrap();
            if last < 0.05 {
                break;
            }
            let g = tape.backward(loss).unwrap().for_params(&bound);
            drop(bound);
            opt.step(enc.params_mut(), &g).unwrap();
        }
        assert!(last < 0.05, "{last}");
    }

    #[test]
    fn ranking_reports_chance_bounds() {
        let (vocab, docs) = toy_corpus(30, 11);
        let enc = toy_encoder(&vocab, AttentionMode::Dense, 0.1);
        let cfg = toy_config(Objective::CpeHier).chunk;
        let r = ranking_accuracy(&enc, &docs, &cfg, PoolingKind::Mean, 8, 1).unwrap();
        assert_eq!(r.trials, 30);
        assert!((0.0..=1.0).contains(&r.accuracy));
        assert_eq!(r, ranking_accuracy(&enc, &docs, &cfg, PoolingKind::Mean, 8, 1).unwrap());
        assert!(ranking_accuracy(&enc, &docs[..5], &cfg, PoolingKind::Mean, 8, 1).is_err());
    }
}
