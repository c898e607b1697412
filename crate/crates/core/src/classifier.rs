//! MLP classification head over document embeddings, trained on frozen
//! embeddings or end to end through the chunk encoder.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{ChunkedDocument, TaskKind};
use crate::encoders::{Encoder, Mode};
use crate::error::{Error, Result};
use crate::pooling::{embed_on_tape, Aggregator, Pooler, PoolingKind};
use crate::tensor::{AdamW, AdamWConfig, Bound, ParamId, ParamSet, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub hidden: Vec<usize>,
    pub threshold: f64,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 16,
            lr: 2e-5,
            weight_decay: 0.001,
            hidden: vec![64, 64, 64],
            threshold: 0.5,
            seed: 0,
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer().validate()?;
        if self.batch_size == 0 || self.hidden.iter().any(|&h| h == 0) {
            return Err(Error::Config("classifier batch size and hidden widths must be positive".into()));
        }
        if !self.threshold.is_finite() {
            return Err(Error::Config("classifier threshold must be finite".into()));
        }
        Ok(())
    }

    fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }
}

/// Tanh hidden layers and a sigmoid (multi-label) or softmax (multi-class) output.
#[derive(Clone, Debug)]
pub struct Mlp {
    task: TaskKind,
    params: ParamSet,
    layers: Vec<(ParamId, ParamId)>,
}

const PREFIX: &str = "head.";

impl Mlp {
    /// Glorot-uniform weights, zero biases.
    pub fn init(input_dim: usize, hidden: &[usize], num_labels: usize, task: TaskKind, seed: u64) -> Result<Self> {
        if task == TaskKind::Unlabeled || input_dim == 0 || num_labels == 0 {
            return Err(Error::InvalidArgument(format!(
                "classifier needs a labeled task, input dim and labels; got {task:?}, {input_dim}, {num_labels}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let mut dims = vec![input_dim];
        dims.extend_from_slice(hidden);
        dims.push(num_labels);
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(l, w)| {
                let bound = (6.0 / (w[0] + w[1]) as f64).sqrt();
                let weight = Tensor::uniform(w[0], w[1], bound, &mut rng);
                (
                    params.add(format!("{PREFIX}layer{l}.w"), weight),
                    params.add(format!("{PREFIX}layer{l}.b"), Tensor::zeros(1, w[1])),
                )
            })
            .collect();
        Ok(Self { task, params, layers })
    }

    pub fn from_params(task: TaskKind, depth: usize, params: ParamSet) -> Result<Self> {
        let layers = (0..depth)
            .map(|l| Ok((params.id(&format!("{PREFIX}layer{l}.w"))?, params.id(&format!("{PREFIX}layer{l}.b"))?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { task, params, layers })
    }

    pub fn task(&self) -> TaskKind {
        self.task
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.params.get(self.layers[0].0).rows()
    }

    pub fn num_labels(&self) -> usize {
        self.params.get(self.layers[self.layers.len() - 1].0).cols()
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Pre-activation outputs (`B x labels`) for inputs `x` (`B x dim`).
    pub fn logits<'t>(&self, bound: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        if x.shape()[1] != self.input_dim() {
            return Err(Error::shape("mlp", &[x.shape(), [self.input_dim(), self.num_labels()]]));
        }
        let last = self.layers.len() - 1;
        let mut h = x;
        for (l, &(w, b)) in self.layers.iter().enumerate() {
            h = h.matmul(bound[w])?.add_row(bound[b])?;
            if l < last {
                h = h.tanh()?;
            }
        }
        Ok(h)
    }

    /// Mean binary cross-entropy (multi-label) or cross-entropy (multi-class).
    pub fn loss<'t>(&self, logits: Var<'t>, labels: &[&BTreeSet<usize>]) -> Result<Var<'t>> {
        let targets = targets(labels, self.num_labels())?;
        match self.task {
            TaskKind::MultiLabel => logits.bce_with_logits(&targets),
            _ => {
                let n = labels.len() as f64;
                let onehot = logits.tape().constant(targets);
                logits.log_softmax()?.mul(onehot)?.sum()?.scale(-1.0 / n)
            }
        }
    }

    /// Output probabilities for a batch of embeddings.
    pub fn probabilities(&self, xs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        if xs.is_empty() {
            return Ok(Vec::new());
        }
        let tape = Tape::new();
        let bound = self.params.bind(&tape, false);
        let logits = self.logits(&bound, tape.constant(Tensor::from_rows(xs)?))?;
        let probs = match self.task {
            TaskKind::MultiLabel => logits.sigmoid()?,
            _ => logits.softmax(None)?,
        };
        let probs = probs.value();
        Ok((0..probs.rows()).map(|r| probs.row(r).to_vec()).collect())
    }

    /// Probabilities for one embedding.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.probabilities(&[x.to_vec()])?.remove(0))
    }
}

fn targets(labels: &[&BTreeSet<usize>], num_labels: usize) -> Result<Tensor> {
    let mut t = Tensor::zeros(labels.len(), num_labels);
    for (r, set) in labels.iter().enumerate() {
        for &l in set.iter() {
            if l >= num_labels {
                return Err(Error::InvalidArgument(format!("label {l} outside {num_labels} labels")));
            }
            t.row_mut(r)[l] = 1.0;
        }
    }
    Ok(t)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Prediction {
    Labels(BTreeSet<usize>),
    Class(usize),
}

impl Prediction {
    pub fn label_set(&self) -> BTreeSet<usize> {
        match self {
            Prediction::Labels(s) => s.clone(),
            Prediction::Class(c) => [*c].into(),
        }
    }
}

/// Thresholds (multi-label) or takes the argmax with the lowest id winning ties.
pub fn predict(probs: &[f64], task: TaskKind, threshold: f64) -> Prediction {
    match task {
        TaskKind::MultiLabel => Prediction::Labels((0..probs.len()).filter(|&l| probs[l] >= threshold).collect()),
        _ => {
            let mut best = 0;
            for (l, &p) in probs.iter().enumerate() {
                if p > probs[best] {
                    best = l;
                }
            }
            Prediction::Class(best)
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean training loss of each epoch.
    pub epoch_losses: Vec<f64>,
}

fn check_labels(labels: &[BTreeSet<usize>], num_labels: usize, task: TaskKind) -> Result<()> {
    for (i, set) in labels.iter().enumerate() {
        if let Some(&bad) = set.iter().find(|&&l| l >= num_labels) {
            return Err(Error::InvalidArgument(format!(
                "example {i}: label {bad} outside {num_labels} labels"
            )));
        }
        if task == TaskKind::MultiClass && set.len() != 1 {
            return Err(Error::InvalidArgument(format!("example {i}: multi-class needs exactly one label")));
        }
    }
    Ok(())
}

/// Fits a fresh head on precomputed embeddings with seeded shuffling.
pub fn train_classifier(
    xs: &[Vec<f64>],
    labels: &[BTreeSet<usize>],
    num_labels: usize,
    task: TaskKind,
    config: &ClassifierConfig,
) -> Result<(Mlp, TrainReport)> {
    config.validate()?;
    if xs.len() != labels.len() || xs.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "{} embeddings with {} label sets",
            xs.len(),
            labels.len()
        )));
    }
    check_labels(labels, num_labels, task)?;
    let mut mlp = Mlp::init(xs[0].len(), &config.hidden, num_labels, task, config.seed)?;
    let mut opt = AdamW::new(config.optimizer(), mlp.params())?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..xs.len()).collect();
    let mut report = TrainReport::default();
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            let rows: Vec<Vec<f64>> = batch.iter().map(|&i| xs[i].clone()).collect();
            let ys: Vec<&BTreeSet<usize>> = batch.iter().map(|&i| &labels[i]).collect();
            let tape = Tape::new();
            let bound = mlp.params.bind(&tape, true);
            let logits = mlp.logits(&bound, tape.constant(Tensor::from_rows(&rows)?))?;
            let loss = mlp.loss(logits, &ys)?;
            let value = loss.item()?;
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("classifier loss {value}")));
            }
            total += value * batch.len() as f64;
            let grads = tape.backward(loss)?.for_params(&bound);
            drop(bound);
            opt.step(&mut mlp.params, &grads)?;
        }
        report.epoch_losses.push(total / xs.len() as f64);
    }
    Ok((mlp, report))
}

/// Joint training of head, optional aggregator and (unless frozen) the
/// chunk encoder on chunked documents.
pub struct EndToEnd<'a> {
    pub encoder: &'a mut Encoder,
    pub aggregator: Option<&'a mut Aggregator>,
    pub head: &'a mut Mlp,
    pub pooling: PoolingKind,
    pub freeze_encoder: bool,
}

pub fn finetune_end2end(
    model: EndToEnd<'_>,
    docs: &[ChunkedDocument],
    labels: &[BTreeSet<usize>],
    config: &ClassifierConfig,
) -> Result<TrainReport> {
    config.validate()?;
    let EndToEnd {
        encoder,
        mut aggregator,
        head,
        pooling,
        freeze_encoder,
    } = model;
    if docs.len() != labels.len() || docs.is_empty() {
        return Err(Error::InvalidArgument(format!("{} documents with {} label sets", docs.len(), labels.len())));
    }
    if pooling == PoolingKind::Transformer && aggregator.is_none() {
        return Err(Error::InvalidArgument("transformer pooling needs an aggregator".into()));
    }
    check_labels(labels, head.num_labels(), head.task())?;
    let mut enc_opt = AdamW::new(config.optimizer(), encoder.params())?;
    let mut head_opt = AdamW::new(config.optimizer(), head.params())?;
    let mut agg_opt = match &aggregator {
        Some(a) => Some(AdamW::new(config.optimizer(), a.params())?),
        None => None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(config.seed);
    dropout_rng.set_stream(1);
    let mut order: Vec<usize> = (0..docs.len()).collect();
    let mut report = TrainReport::default();
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            let tape = Tape::new();
            let enc_bound = encoder.params().bind(&tape, !freeze_encoder);
            let agg_bound = aggregator.as_ref().map(|a| a.params().bind(&tape, true));
            let head_bound = head.params().bind(&tape, true);
            let pooler = match (pooling, aggregator.as_deref(), &agg_bound) {
                (PoolingKind::Mean, ..) => Pooler::Mean,
                (PoolingKind::Max, ..) => Pooler::Max,
                (PoolingKind::Transformer, Some(a), Some(b)) => Pooler::Transformer(a, b),
                _ => unreachable!(),
            };
            let batch_docs: Vec<&ChunkedDocument> = batch.iter().map(|&i| &docs[i]).collect();
            let ys: Vec<&BTreeSet<usize>> = batch.iter().map(|&i| &labels[i]).collect();
            let x = embed_on_tape(encoder, &enc_bound, &batch_docs, pooler, &mut Mode::Train(&mut dropout_rng))?;
            let loss = head.loss(head.logits(&head_bound, x)?, &ys)?;
            let value = loss.item()?;
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("end-to-end loss {value}")));
            }
            total += value * batch.len() as f64;
            let grads = tape.backward(loss)?;
            let head_grads = grads.for_params(&head_bound);
            let agg_grads = agg_bound.as_ref().map(|b| grads.for_params(b));
            let enc_grads = (!freeze_encoder).then(|| grads.for_params(&enc_bound));
            drop((enc_bound, agg_bound, head_bound));
            head_opt.step(head.params_mut(), &head_grads)?;
            if let (Some(a), Some(opt), Some(g)) = (aggregator.as_deref_mut(), agg_opt.as_mut(), agg_grads) {
                opt.step(a.params_mut(), &g)?;
            }
            if let Some(g) = enc_grads {
                enc_opt.step(encoder.params_mut(), &g)?;
            }
        }
        report.epoch_losses.push(total / docs.len() as f64);
    }
    Ok(report)
}

/// One line of the predictions export.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    pub pred: Vec<usize>,
    pub probs: Vec<f64>,
}

pub fn write_predictions(path: &Path, records: &[PredictionRecord]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).map_err(|e| Error::InvalidArgument(e.to_string()))?);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Random embeddings for smoke tests: `n` rows of dimension `dim`.
#[doc(hidden)]
pub fn random_rows<R: Rng>(n: usize, dim: usize, rng: &mut R) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
}
