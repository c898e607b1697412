//! Topic-mixture corpora for desk-scale experiments.
//!
//! Each topic owns a disjoint block of words (`t{k}w{j}`) and a shared block
//! (`s{j}`) plays the role of function words. A document picks its topic(s),
//! then draws each token from the shared block with probability
//! `noise_rate`, otherwise from one of its topics. Within a topic every
//! document ranks the topic's words in its own random order and samples
//! them Zipf-style, so chunks of one document share vocabulary beyond what
//! the topic alone explains.

use rand::distributions::WeightedIndex;
use rand::prelude::*;
use rand::seq::index::sample;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{RawDocument, TaskKind};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_docs: usize,
    pub num_topics: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub vocab_per_topic: usize,
    pub shared_vocab: usize,
    pub noise_rate: f64,
    /// Upper bound on topics per document; 1 yields a multi-class corpus.
    pub labels_per_doc: usize,
    pub zipf_exponent: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_docs: 1000,
            num_topics: 4,
            min_len: 128,
            max_len: 320,
            vocab_per_topic: 150,
            shared_vocab: 300,
            noise_rate: 0.6,
            labels_per_doc: 1,
            zipf_exponent: 1.0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let problems = [
            (self.num_topics < 2, "num_topics must be at least 2"),
            (self.min_len == 0, "min_len must be positive"),
            (self.min_len > self.max_len, "min_len exceeds max_len"),
            (self.vocab_per_topic == 0, "vocab_per_topic must be positive"),
            (!(0.0..=1.0).contains(&self.noise_rate), "noise_rate must lie in [0, 1]"),
            (self.noise_rate > 0.0 && self.shared_vocab == 0, "noise_rate > 0 needs a shared vocabulary"),
            (
                self.labels_per_doc == 0 || self.labels_per_doc > self.num_topics,
                "labels_per_doc must lie in 1..=num_topics",
            ),
            (!(self.zipf_exponent >= 0.0), "zipf_exponent must be non-negative"),
        ];
        match problems.iter().find(|(bad, _)| *bad) {
            Some((_, msg)) => Err(Error::Config(format!("synthetic spec: {msg}"))),
            None => Ok(()),
        }
    }

    pub fn task(&self) -> TaskKind {
        if self.labels_per_doc == 1 {
            TaskKind::MultiClass
        } else {
            TaskKind::MultiLabel
        }
    }

    fn zipf_weights(&self, n: usize) -> Vec<f64> {
        (0..n).map(|r| 1.0 / ((r + 1) as f64).powf(self.zipf_exponent)).collect()
    }
}

pub fn topic_word(topic: usize, j: usize) -> String {
    format!("t{topic}w{j}")
}

pub fn shared_word(j: usize) -> String {
    format!("s{j}")
}

/// Generates `spec.num_docs` documents. Document `i` draws from its own
/// ChaCha stream, so output depends only on `(spec, seed)`.
pub fn gen_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<Vec<RawDocument>> {
    spec.validate()?;
    let rank_weights = WeightedIndex::new(spec.zipf_weights(spec.vocab_per_topic))
        .map_err(|e| Error::Config(e.to_string()))?;
    let shared = if spec.shared_vocab > 0 {
        Some(WeightedIndex::new(spec.zipf_weights(spec.shared_vocab)).map_err(|e| Error::Config(e.to_string()))?)
    } else {
        None
    };

    let docs = (0..spec.num_docs)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);

            let n_labels = rng.gen_range(1..=spec.labels_per_doc);
            let mut topics = sample(&mut rng, spec.num_topics, n_labels).into_vec();
            topics.sort_unstable();
            // This document's private ranking of each of its topics' words.
            let rankings: Vec<Vec<usize>> = topics
                .iter()
                .map(|_| {
                    let mut order: Vec<usize> = (0..spec.vocab_per_topic).collect();
                    order.shuffle(&mut rng);
                    order
                })
                .collect();

            let len = rng.gen_range(spec.min_len..=spec.max_len);
            let words: Vec<String> = (0..len)
                .map(|_| match &shared {
                    Some(s) if rng.gen::<f64>() < spec.noise_rate => shared_word(s.sample(&mut rng)),
                    _ => {
                        let which = rng.gen_range(0..topics.len());
                        let rank = rank_weights.sample(&mut rng);
                        topic_word(topics[which], rankings[which][rank])
                    }
                })
                .collect();
            RawDocument {
                id: format!("syn-{i:05}"),
                text: words.join(" "),
                labels: topics,
            }
        })
        .collect();
    Ok(docs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticSpec {
        SyntheticSpec {
            num_docs: 50,
            min_len: 20,
            max_len: 40,
            ..Default::default()
        }
    }

    #[test]
    fn same_seed_same_corpus() {
        let a = serde_json::to_string(&gen_synthetic(&small(), 7).unwrap()).unwrap();
        let b = serde_json::to_string(&gen_synthetic(&small(), 7).unwrap()).unwrap();
        assert_eq!(a, b);
        let c = serde_json::to_string(&gen_synthetic(&small(), 8).unwrap()).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn zero_noise_stays_in_topic_region() {
        let spec = SyntheticSpec {
            noise_rate: 0.0,
            ..small()
        };
        for doc in gen_synthetic(&spec, 1).unwrap() {
            let prefix = format!("t{}w", doc.labels[0]);
            assert!(doc.text.split(' ').all(|w| w.starts_with(&prefix)), "{}", doc.id);
        }
    }

    #[test]
    fn lengths_and_labels_follow_the_settings() {
        let spec = SyntheticSpec {
            labels_per_doc: 3,
            ..small()
        };
        assert_eq!(spec.task(), TaskKind::MultiLabel);
        for doc in gen_synthetic(&spec, 2).unwrap() {
            let n = doc.text.split(' ').count();
            assert!((20..=40).contains(&n));
            assert!((1..=3).contains(&doc.labels.len()));
            assert!(doc.labels.windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn topic_counts_are_binomial() {
        // 400 docs, 4 topics: each count ~ Bin(400, 1/4), sd = sqrt(75) ~ 8.66.
        let spec = SyntheticSpec {
            num_docs: 400,
            ..small()
        };
        let mut counts = [0usize; 4];
        for doc in gen_synthetic(&spec, 3).unwrap() {
            counts[doc.labels[0]] += 1;
        }
        assert_eq!(counts.iter().sum::<usize>(), 400);
        for c in counts {
            assert!((c as f64 - 100.0).abs() <= 3.0 * 75f64.sqrt(), "{counts:?}");
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(gen_synthetic(&SyntheticSpec { num_topics: 1, ..small() }, 0).is_err());
        assert!(gen_synthetic(&SyntheticSpec { min_len: 0, ..small() }, 0).is_err());
        assert!(gen_synthetic(&SyntheticSpec { noise_rate: 1.5, ..small() }, 0).is_err());
    }
}
