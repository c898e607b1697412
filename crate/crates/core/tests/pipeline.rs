use std::collections::BTreeSet;

use cpe_core::checkpoint::{Checkpoint, CheckpointMeta};
use cpe_core::classifier::{predict, train_classifier, ClassifierConfig};
use cpe_core::corpus::{
    chunk, gen_synthetic, load_jsonl, split_train_test, write_jsonl, ChunkConfig, ChunkedDocument, RawDocument,
    SyntheticSpec, TaskKind, VocabSource,
};
use cpe_core::encoders::{AttentionMode, Encoder, EncoderConfig};
use cpe_core::eval::f1_scores;
use cpe_core::pooling::{embed_documents, embed_long_documents, PoolingKind};
use cpe_core::training::{pretrain, Objective, PretrainConfig};
use cpe_core::Error;

const CHUNK: ChunkConfig = ChunkConfig {
    chunk_len: 16,
    n_chunks: 8,
    max_tokens: 128,
};

fn corpus(dir: &std::path::Path, spec: &SyntheticSpec) -> (cpe_core::corpus::Vocab, Vec<cpe_core::corpus::Document>) {
    let path = dir.join("corpus.jsonl");
    write_jsonl(&path, &gen_synthetic(spec, 5).unwrap()).unwrap();
    load_jsonl(&path, VocabSource::Build { min_freq: 1 }, spec.task(), Some(spec.num_topics)).unwrap()
}

fn encoder(vocab_len: usize, attention: AttentionMode, max_positions: usize) -> Encoder {
    let config = EncoderConfig {
        vocab_size: vocab_len,
        dim: 16,
        layers: 1,
        heads: 2,
        ff_dim: 32,
        max_positions,
        dropout: 0.1,
        attention,
    };
    Encoder::init(config, 5).unwrap()
}

#[test]
fn synthetic_corpus_to_classifier_scores() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticSpec {
        num_docs: 120,
        min_len: 40,
        max_len: 120,
        ..Default::default()
    };
    let (vocab, docs) = corpus(dir.path(), &spec);
    let (train, test) = split_train_test(&docs, 0.25);
    let mut enc = encoder(vocab.len(), AttentionMode::Dense, CHUNK.positions());
    let config = PretrainConfig {
        epochs: 2,
        lr: 1e-3,
        chunk: CHUNK,
        ..Default::default()
    };
    let report = pretrain(&mut enc, &train, &config, |_| {}).unwrap();
    assert_eq!(report.used + report.skipped, train.len());
    assert!(report.steps.iter().all(|s| s.loss.is_finite() && s.loss >= 0.0));

    let embed = |docs: &[cpe_core::corpus::Document]| {
        let chunked: Vec<ChunkedDocument> = docs.iter().map(|d| chunk(d, &CHUNK)).collect();
        embed_documents(&enc, &chunked, PoolingKind::Max, None).unwrap()
    };
    let (xs, xs_test) = (embed(&train), embed(&test));
    assert!(xs.iter().all(|v| v.len() == 16 && v.iter().all(|x| x.is_finite())));
    let labels = |docs: &[cpe_core::corpus::Document]| docs.iter().map(|d| d.labels.clone()).collect::<Vec<_>>();
    let clf = ClassifierConfig {
        epochs: 5,
        lr: 1e-3,
        hidden: vec![16],
        ..Default::default()
    };
    let (head, train_report) = train_classifier(&xs, &labels(&train), 4, TaskKind::MultiClass, &clf).unwrap();
    assert_eq!(train_report.epoch_losses.len(), 5);
    let preds: Vec<BTreeSet<usize>> = head
        .probabilities(&xs_test)
        .unwrap()
        .iter()
        .map(|p| predict(p, TaskKind::MultiClass, 0.5).label_set())
        .collect();
    let scores = f1_scores(&preds, &labels(&test), 4, TaskKind::MultiClass).unwrap();
    assert!((0.0..=1.0).contains(&scores.macro_f1) && (0.0..=1.0).contains(&scores.micro_f1));
}

#[test]
fn checkpoint_reload_reproduces_embeddings() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticSpec {
        num_docs: 24,
        min_len: 40,
        max_len: 100,
        ..Default::default()
    };
    let (vocab, docs) = corpus(dir.path(), &spec);
    let mut enc = encoder(vocab.len(), AttentionMode::Dense, CHUNK.positions());
    let config = PretrainConfig {
        epochs: 1,
        lr: 1e-3,
        chunk: CHUNK,
        ..Default::default()
    };
    pretrain(&mut enc, &docs, &config, |_| {}).unwrap();
    let path = dir.path().join("checkpoint.bin");
    Checkpoint::new(CheckpointMeta {
        stage: "pretrain".into(),
        objective: Some(Objective::CpeHier),
        ..Default::default()
    })
    .with_encoder(&enc)
    .unwrap()
    .with_vocab(&vocab)
    .write(&path)
    .unwrap();

    let back = Checkpoint::read(&path).unwrap();
    assert_eq!(back.vocab().unwrap(), vocab);
    let reloaded = back.encoder().unwrap();
    let chunked: Vec<ChunkedDocument> = docs.iter().map(|d| chunk(d, &CHUNK)).collect();
    assert_eq!(
        embed_documents(&enc, &chunked, PoolingKind::Mean, None).unwrap(),
        embed_documents(&reloaded, &chunked, PoolingKind::Mean, None).unwrap()
    );
}

#[test]
fn sliding_path_pretrains_and_embeds_long_documents() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticSpec {
        num_docs: 16,
        min_len: 60,
        max_len: 200,
        ..Default::default()
    };
    let (vocab, docs) = corpus(dir.path(), &spec);
    let mut enc = encoder(vocab.len(), AttentionMode::sliding(4), 97);
    let config = PretrainConfig {
        objective: Objective::CpeLong,
        epochs: 1,
        lr: 1e-3,
        chunk: CHUNK,
        ..Default::default()
    };
    let report = pretrain(&mut enc, &docs, &config, |_| {}).unwrap();
    assert_eq!(report.skipped, docs.iter().filter(|d| d.len() < 32).count());
    let vectors = embed_long_documents(&enc, &docs).unwrap();
    assert_eq!(vectors.len(), docs.len());
    assert!(vectors.iter().all(|v| v.len() == 16 && v.iter().all(|x| x.is_finite())));
}

#[test]
fn jsonl_ingestion_keeps_order_and_checks_labels() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("docs.jsonl");
    let raw = vec![
        RawDocument {
            id: "b".into(),
            text: "Second, document here.".into(),
            labels: vec![2, 0],
        },
        RawDocument {
            id: "a".into(),
            text: "first".into(),
            labels: vec![],
        },
    ];
    write_jsonl(&path, &raw).unwrap();
    let (vocab, docs) = load_jsonl(&path, VocabSource::Build { min_freq: 1 }, TaskKind::MultiLabel, Some(3)).unwrap();
    assert_eq!(docs.iter().map(|d| d.id.as_str()).collect::<Vec<_>>(), ["b", "a"]);
    assert_eq!(docs[0].labels, BTreeSet::from([0, 2]));
    assert_eq!(vocab.detokenize(&docs[1].tokens), "first");
    let err = load_jsonl(&path, VocabSource::Existing(&vocab), TaskKind::MultiLabel, Some(2)).unwrap_err();
    assert!(matches!(err, Error::Parse { line: 1, .. }), "{err}");
}
