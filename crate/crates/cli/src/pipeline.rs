//! One function per command. Each reads its inputs from the output
//! directory, writes its artifacts there and returns what it computed.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use cpe_core::checkpoint::{Checkpoint, CheckpointMeta};
use cpe_core::classifier::{predict, train_classifier, write_predictions, PredictionRecord, TrainReport};
use cpe_core::corpus::{self, chunk, gen_synthetic, load_jsonl, split_train_test, Document, TaskKind, Vocab, VocabSource};
use cpe_core::encoders::{Encoder, EncoderConfig, INIT_DESCRIPTION};
use cpe_core::eval::{self, EmbeddingRow};
use cpe_core::pooling::{embed_documents, embed_long_documents, Aggregator, AggregatorConfig, PoolingKind, Provenance};
use cpe_core::training::{self, Objective, PretrainReport};

use crate::config::ExperimentConfig;

pub const CORPUS: &str = "corpus.jsonl";
pub const CHECKPOINT: &str = "checkpoint.bin";
pub const PRETRAIN_LOG: &str = "pretrain_log.tsv";
pub const EMBEDDINGS: &str = "embeddings.tsv";
pub const PROVENANCE: &str = "embeddings.provenance.json";
pub const CLASSIFIER: &str = "clf.bin";
pub const CLASSIFIER_LOG: &str = "clf_log.tsv";
pub const PREDICTIONS: &str = "predictions.jsonl";
pub const METRICS: &str = "metrics.txt";
pub const SWEEP: &str = "sweep.tsv";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    F1,
    Cluster,
}

impl FromStr for Metric {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f1" => Ok(Metric::F1),
            "cluster" => Ok(Metric::Cluster),
            other => bail!("unknown metric {other:?} (expected f1 or cluster)"),
        }
    }
}

/// Parses `multilabel`/`multiclass` (hyphenated forms also accepted).
pub fn parse_task(s: &str) -> Result<TaskKind> {
    match s.replace('-', "").as_str() {
        "multilabel" => Ok(TaskKind::MultiLabel),
        "multiclass" => Ok(TaskKind::MultiClass),
        _ => bail!("unknown task {s:?} (expected multilabel or multiclass)"),
    }
}

/// Fails with a message naming the command that produces `path`.
fn require(path: &Path, stage: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        bail!("missing {}: run `{stage}` first", path.display())
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

pub struct Corpus {
    pub vocab: Vocab,
    pub docs: Vec<Document>,
    pub task: TaskKind,
    pub num_labels: usize,
}

pub fn corpus_path(cfg: &ExperimentConfig) -> PathBuf {
    cfg.corpus.path.clone().unwrap_or_else(|| cfg.out_dir.join(CORPUS))
}

fn infer_task(mut label_sets: impl Iterator<Item = usize> + Clone) -> TaskKind {
    if label_sets.clone().all(|n| n == 0) {
        TaskKind::Unlabeled
    } else if label_sets.all(|n| n == 1) {
        TaskKind::MultiClass
    } else {
        TaskKind::MultiLabel
    }
}

/// Reads the corpus, building the vocabulary unless one is given.
pub fn load_corpus(cfg: &ExperimentConfig, vocab: Option<&Vocab>) -> Result<Corpus> {
    let path = corpus_path(cfg);
    if cfg.corpus.path.is_none() {
        require(&path, "gen-synthetic")?;
    }
    let raw = corpus::read_jsonl(&path)?;
    if raw.is_empty() {
        bail!("corpus {} is empty", path.display());
    }
    let task = cfg.corpus.task.unwrap_or_else(|| infer_task(raw.iter().map(|d| d.labels.len())));
    let source = match vocab {
        Some(v) => VocabSource::Existing(v),
        None => VocabSource::Build {
            min_freq: cfg.corpus.min_freq,
        },
    };
    let (vocab, docs) = load_jsonl(&path, source, task, cfg.corpus.num_labels)?;
    let num_labels = cfg
        .corpus
        .num_labels
        .unwrap_or_else(|| docs.iter().flat_map(|d| d.labels.iter()).max().map_or(0, |m| m + 1));
    Ok(Corpus {
        vocab,
        docs,
        task,
        num_labels,
    })
}

/// Encoder shape for this run: vocabulary size from the corpus and, on the
/// hierarchical path, one position per chunk token plus CLS.
pub fn encoder_config(cfg: &ExperimentConfig, vocab_len: usize) -> Result<EncoderConfig> {
    let mut e = cfg.encoder.clone();
    e.vocab_size = vocab_len;
    if cfg.pretrain.objective == Objective::CpeLong {
        if e.max_positions < cfg.chunk.positions() {
            bail!(
                "encoder.max_positions {} cannot hold a {}-token chunk plus CLS",
                e.max_positions,
                cfg.chunk.chunk_len
            );
        }
    } else {
        e.max_positions = cfg.chunk.positions();
    }
    e.validate()?;
    Ok(e)
}

pub fn gen_synthetic_cmd(cfg: &ExperimentConfig) -> Result<PathBuf> {
    cfg.echo("gen-synthetic")?;
    let docs = gen_synthetic(&cfg.synthetic, cfg.seed)?;
    let path = cfg.out_dir.join(CORPUS);
    corpus::write_jsonl(&path, &docs)?;
    Ok(path)
}

pub fn pretrain_cmd(cfg: &ExperimentConfig) -> Result<PretrainReport> {
    let corpus = load_corpus(cfg, None)?;
    let mut cfg = cfg.clone();
    cfg.encoder = encoder_config(&cfg, corpus.vocab.len())?;
    let cfg = &cfg;
    cfg.echo("pretrain")?;
    let (train, _) = split_train_test(&corpus.docs, cfg.corpus.test_fraction);
    let mut encoder = Encoder::init(cfg.encoder.clone(), cfg.seed)?;

    let log_path = cfg.out_dir.join(PRETRAIN_LOG);
    let file = fs::File::create(&log_path).with_context(|| format!("cannot write {}", log_path.display()))?;
    let mut log = BufWriter::new(file);
    let mut log_err = writeln!(log, "step\tepoch\tobjective\tloss").err();
    let report = training::pretrain(&mut encoder, &train, &cfg.pretrain, |s| {
        if log_err.is_none() {
            log_err = writeln!(log, "{s}").err();
        }
    })?;
    if let Some(e) = log_err.or_else(|| log.flush().err()) {
        return Err(e).with_context(|| format!("cannot write {}", log_path.display()));
    }

    let meta = CheckpointMeta {
        stage: "pretrain".into(),
        seed: cfg.seed,
        init: INIT_DESCRIPTION.into(),
        objective: Some(cfg.pretrain.objective),
        chunk: Some(cfg.chunk),
        pooling: Some(cfg.pretrain.pooling),
        config: serde_json::to_value(cfg)?,
        ..Default::default()
    };
    Checkpoint::new(meta)
        .with_encoder(&encoder)?
        .with_vocab(&corpus.vocab)
        .write(&cfg.out_dir.join(CHECKPOINT))?;
    Ok(report)
}

/// FNV-1a over the checkpoint bytes, used as the encoder id in provenance.
fn digest(bytes: &[u8]) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    format!("{h:016x}")
}

/// Embeds every corpus document, in corpus order. Without `random_init` the
/// encoder comes from the pretrain checkpoint.
pub fn embed_cmd(cfg: &ExperimentConfig, random_init: bool) -> Result<Vec<EmbeddingRow>> {
    let (corpus, encoder, chunk_config, long, encoder_id, aggregator) = if random_init {
        let corpus = load_corpus(cfg, None)?;
        let encoder = Encoder::init(encoder_config(cfg, corpus.vocab.len())?, cfg.seed)?;
        let long = cfg.pretrain.objective == Objective::CpeLong;
        (corpus, encoder, cfg.chunk, long, format!("random-init:{}", cfg.seed), None)
    } else {
        let path = cfg.out_dir.join(CHECKPOINT);
        require(&path, "pretrain").map_err(|e| anyhow!("{e} (or pass --random-init)"))?;
        let bytes = fs::read(&path).with_context(|| format!("cannot read {}", path.display()))?;
        let ck = Checkpoint::from_bytes(&bytes).with_context(|| format!("cannot load {}", path.display()))?;
        let vocab = ck.vocab()?;
        let corpus = load_corpus(cfg, Some(&vocab))?;
        let long = ck.meta.objective == Some(Objective::CpeLong);
        let chunk_config = ck.meta.chunk.unwrap_or(cfg.chunk);
        (corpus, ck.encoder()?, chunk_config, long, format!("checkpoint:{}", digest(&bytes)), ck.aggregator()?)
    };
    let mut echo = cfg.clone();
    echo.encoder = encoder.config().clone();
    echo.chunk = chunk_config;
    echo.pretrain.chunk = chunk_config;
    echo.echo("embed")?;
    let pooling = cfg.embed.pooling;
    let vectors = if long {
        embed_long_documents(&encoder, &corpus.docs)?
    } else {
        let chunked: Vec<_> = corpus.docs.iter().map(|d| chunk(d, &chunk_config)).collect();
        let aggregator = match (pooling, aggregator) {
            (PoolingKind::Transformer, None) => Some(Aggregator::init(
                AggregatorConfig::for_encoder(encoder.config(), chunk_config.n_chunks),
                cfg.seed,
            )?),
            (_, a) => a,
        };
        embed_documents(&encoder, &chunked, pooling, aggregator.as_ref())?
    };
    let rows: Vec<EmbeddingRow> = corpus
        .docs
        .iter()
        .zip(vectors)
        .map(|(d, vector)| EmbeddingRow {
            id: d.id.clone(),
            labels: d.labels.clone(),
            vector,
        })
        .collect();
    eval::write_embeddings(&cfg.out_dir.join(EMBEDDINGS), &rows)?;
    let provenance = Provenance {
        pooling,
        encoder: encoder_id,
    };
    write_text(&cfg.out_dir.join(PROVENANCE), &serde_json::to_string_pretty(&provenance)?)?;
    Ok(rows)
}

fn read_rows(cfg: &ExperimentConfig) -> Result<Vec<EmbeddingRow>> {
    let path = cfg.out_dir.join(EMBEDDINGS);
    require(&path, "embed")?;
    let rows = eval::read_embeddings(&path)?;
    if rows.is_empty() {
        bail!("{} holds no embeddings", path.display());
    }
    Ok(rows)
}

/// Trains the MLP head on the training split of the stored embeddings.
pub fn train_clf_cmd(cfg: &ExperimentConfig, task: Option<TaskKind>) -> Result<TrainReport> {
    cfg.echo("train-clf")?;
    let rows = read_rows(cfg)?;
    let (train, _) = split_train_test(&rows, cfg.corpus.test_fraction);
    let task = task
        .or(cfg.corpus.task)
        .unwrap_or_else(|| infer_task(rows.iter().map(|r| r.labels.len())));
    let num_labels = cfg
        .corpus
        .num_labels
        .unwrap_or_else(|| rows.iter().flat_map(|r| r.labels.iter()).max().map_or(0, |m| m + 1));
    let xs: Vec<Vec<f64>> = train.iter().map(|r| r.vector.clone()).collect();
    let ys: Vec<BTreeSet<usize>> = train.iter().map(|r| r.labels.clone()).collect();
    let (head, report) = train_classifier(&xs, &ys, num_labels, task, &cfg.classifier)?;

    let mut log = String::from("epoch\tloss\n");
    for (e, loss) in report.epoch_losses.iter().enumerate() {
        writeln!(log, "{}\t{loss}", e + 1).unwrap();
    }
    write_text(&cfg.out_dir.join(CLASSIFIER_LOG), &log)?;
    let meta = CheckpointMeta {
        stage: "train-clf".into(),
        seed: cfg.seed,
        config: serde_json::to_value(cfg)?,
        ..Default::default()
    };
    Checkpoint::new(meta)
        .with_head(&head, cfg.classifier.threshold)?
        .write(&cfg.out_dir.join(CLASSIFIER))?;
    Ok(report)
}

/// Scores the held-out split and writes `metrics.txt`.
pub fn eval_cmd(cfg: &ExperimentConfig, metrics: &[Metric]) -> Result<Vec<(String, f64)>> {
    cfg.echo("eval")?;
    if metrics.is_empty() {
        bail!("no metrics requested");
    }
    let rows = read_rows(cfg)?;
    let (_, test) = split_train_test(&rows, cfg.corpus.test_fraction);
    if test.is_empty() {
        bail!("the held-out split is empty; raise corpus.test_fraction");
    }
    let mut out = Vec::new();
    if metrics.contains(&Metric::F1) {
        let path = cfg.out_dir.join(CLASSIFIER);
        require(&path, "train-clf")?;
        let ck = Checkpoint::read(&path)?;
        let head = ck.head()?;
        let threshold = ck.meta.head.as_ref().map_or(cfg.classifier.threshold, |h| h.threshold);
        let xs: Vec<Vec<f64>> = test.iter().map(|r| r.vector.clone()).collect();
        let probs = head.probabilities(&xs)?;
        let preds: Vec<BTreeSet<usize>> = probs
            .iter()
            .map(|p| predict(p, head.task(), threshold).label_set())
            .collect();
        let gold: Vec<BTreeSet<usize>> = test.iter().map(|r| r.labels.clone()).collect();
        let report = eval::f1_scores(&preds, &gold, head.num_labels(), head.task())?;
        out.push(("macro_f1".to_string(), report.macro_f1));
        out.push(("micro_f1".to_string(), report.micro_f1));
        for (l, s) in report.per_label.iter().enumerate() {
            out.push((format!("f1_label_{l}"), s.f1));
        }
        let records: Vec<PredictionRecord> = test
            .iter()
            .zip(&preds)
            .zip(probs)
            .map(|((r, p), probs)| PredictionRecord {
                id: r.id.clone(),
                pred: p.iter().copied().collect(),
                probs,
            })
            .collect();
        write_predictions(&cfg.out_dir.join(PREDICTIONS), &records)?;
    }
    if metrics.contains(&Metric::Cluster) {
        let gold = test
            .iter()
            .map(|r| r.labels.iter().next().copied().ok_or_else(|| anyhow!("document {:?} has no label to cluster against", r.id)))
            .collect::<Result<Vec<usize>>>()?;
        let points: Vec<Vec<f64>> = test.iter().map(|r| r.vector.clone()).collect();
        let points = if cfg.cluster.standardize { eval::standardize(&points) } else { points };
        let report = eval::cluster_report(&points, &gold, cfg.cluster.eps, cfg.cluster.min_pts)?;
        out.push(("homogeneity".to_string(), report.homogeneity));
        out.push(("completeness".to_string(), report.completeness));
        out.push(("clusters".to_string(), report.num_clusters() as f64));
        out.push(("noise".to_string(), report.num_noise() as f64));
    }
    eval::write_metrics(&cfg.out_dir.join(METRICS), &out)?;
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub chunk_len: usize,
    pub macro_f1: f64,
    pub micro_f1: f64,
}

fn sweep_arm(cfg: &ExperimentConfig) -> Result<SweepRow> {
    pretrain_cmd(cfg)?;
    embed_cmd(cfg, false)?;
    train_clf_cmd(cfg, None)?;
    let metrics = eval_cmd(cfg, &[Metric::F1])?;
    let get = |name: &str| metrics.iter().find(|(n, _)| n == name).map(|(_, v)| *v).unwrap();
    Ok(SweepRow {
        chunk_len: cfg.chunk.chunk_len,
        macro_f1: get("macro_f1"),
        micro_f1: get("micro_f1"),
    })
}

/// Runs pretrain, embed, train-clf and F1 eval once per chunk length, each
/// arm in `sweep/chunk_<len>/`, keeping the token budget `chunk.max_tokens`.
pub fn sweep_chunk_cmd(cfg: &ExperimentConfig) -> Result<Vec<SweepRow>> {
    cfg.echo("sweep-chunk")?;
    let corpus = corpus_path(cfg);
    if cfg.corpus.path.is_none() {
        require(&corpus, "gen-synthetic")?;
    }
    let arms = cfg
        .sweep
        .sizes
        .iter()
        .map(|&size| {
            if size > cfg.chunk.max_tokens {
                bail!("chunk length {size} exceeds chunk.max_tokens {}", cfg.chunk.max_tokens);
            }
            let mut arm = cfg.clone();
            arm.chunk.chunk_len = size;
            arm.chunk.n_chunks = cfg.chunk.max_tokens.div_ceil(size);
            arm.pretrain.chunk = arm.chunk;
            arm.corpus.path = Some(corpus.clone());
            arm.out_dir = cfg.out_dir.join("sweep").join(format!("chunk_{size}"));
            Ok(arm)
        })
        .collect::<Result<Vec<_>>>()?;
    let rows = if cfg.sweep.parallel {
        std::thread::scope(|s| {
            let handles: Vec<_> = arms.iter().map(|arm| s.spawn(move || sweep_arm(arm))).collect();
            handles
                .into_iter()
                .map(|h| h.join().map_err(|_| anyhow!("sweep arm panicked"))?)
                .collect::<Result<Vec<_>>>()
        })?
    } else {
        arms.iter().map(sweep_arm).collect::<Result<Vec<_>>>()?
    };
    let mut text = String::from("chunk_len\tmacro_f1\tmicro_f1\n");
    for r in &rows {
        writeln!(text, "{}\t{}\t{}", r.chunk_len, r.macro_f1, r.micro_f1).unwrap();
    }
    write_text(&cfg.out_dir.join(SWEEP), &text)?;
    Ok(rows)
}
