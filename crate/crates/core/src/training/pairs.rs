use rand::Rng;

use crate::corpus::{ChunkedDocument, Document, CLS};

/// What the held-out chunk is scored against.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Anchor {
    /// The chunked document with the held-out slot masked as padding.
    Chunks(ChunkedDocument),
    /// CLS followed by the document tokens outside the held-out span.
    Reference(Vec<usize>),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CpePair {
    pub anchor: Anchor,
    /// CLS followed by the held-out content tokens.
    pub positive: Vec<usize>,
    pub doc_id: String,
    /// Held-out slot (hierarchical) or token offset (reference text).
    pub held_out: usize,
}

/// Removes one uniformly chosen real chunk. `None` when fewer than two
/// real chunks exist.
pub fn sample_pair_hier<R: Rng + ?Sized>(doc: &ChunkedDocument, rng: &mut R) -> Option<CpePair> {
    let real = doc.real_indices();
    if real.len() < 2 {
        return None;
    }
    let h = real[rng.gen_range(0..real.len())];
    let mut positive = vec![CLS];
    positive.extend(doc.content(h));
    let mut anchor = doc.clone();
    anchor.mask_slot(h);
    Some(CpePair {
        anchor: Anchor::Chunks(anchor),
        positive,
        doc_id: doc.doc_id.clone(),
        held_out: h,
    })
}

/// Cuts a `chunk_len` span at a uniform offset in `0..=len - chunk_len`;
/// the rest, in order, forms the reference text, cut to `budget` content
/// tokens. `None` when no token would remain for the reference text.
/// [`pretrain`](super::pretrain) applies the stricter `2 * chunk_len` filter.
pub fn sample_pair_long<R: Rng + ?Sized>(doc: &Document, chunk_len: usize, budget: usize, rng: &mut R) -> Option<CpePair> {
    let len = doc.tokens.len();
    if chunk_len == 0 || len <= chunk_len || budget == 0 {
        return None;
    }
    let offset = rng.gen_range(0..=len - chunk_len);
    let mut positive = vec![CLS];
    positive.extend_from_slice(&doc.tokens[offset..offset + chunk_len]);
    let mut reference = vec![CLS];
    reference.extend(
        doc.tokens[..offset]
            .iter()
            .chain(&doc.tokens[offset + chunk_len..])
            .take(budget),
    );
    Some(CpePair {
        anchor: Anchor::Reference(reference),
        positive,
        doc_id: doc.id.clone(),
        held_out: offset,
    })
}

/// Word repetition: each token is independently duplicated in place with
/// probability `rate`.
pub fn esimcse_augment<R: Rng + ?Sized>(tokens: &[usize], rate: f64, rng: &mut R) -> Vec<usize> {
    let mut out = Vec::with_capacity(tokens.len() + (tokens.len() as f64 * rate) as usize + 1);
    for &t in tokens {
        out.push(t);
        if rate > 0.0 && rng.gen::<f64>() < rate {
            out.push(t);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{chunk_tokens, ChunkConfig, TaskKind};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn doc(len: usize) -> Document {
        Document::new("d", (0..len).map(|i| 3 + i % 50).collect(), Default::default(), TaskKind::Unlabeled).unwrap()
    }

    fn four_chunks() -> ChunkedDocument {
        let cfg = ChunkConfig {
            chunk_len: 4,
            n_chunks: 6,
            max_tokens: 64,
        };
        chunk_tokens("d", &(3..19).collect::<Vec<_>>(), &cfg)
    }

    #[test]
    fn hierarchical_pair_masks_the_held_out_slot() {
        let d = four_chunks();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pair = (0..50)
            .map(|_| sample_pair_hier(&d, &mut rng).unwrap())
            .find(|p| p.held_out == 2)
            .unwrap();
        assert_eq!(pair.positive, [CLS, 11, 12, 13, 14]);
        let Anchor::Chunks(anchor) = &pair.anchor else { panic!() };
        assert_eq!(anchor.real_indices(), [0, 1, 3]);
        assert_eq!(anchor.content_tokens(), [3, 4, 5, 6, 7, 8, 9, 10, 15, 16, 17, 18]);
        assert!(anchor.chunks[2].iter().all(|&t| t == crate::corpus::PAD));
    }

    #[test]
    fn single_chunk_documents_are_skipped() {
        let d = chunk_tokens("d", &[5, 6, 7], &ChunkConfig::default());
        assert!(sample_pair_hier(&d, &mut ChaCha8Rng::seed_from_u64(0)).is_none());
    }

    #[test]
    fn held_out_index_is_uniform() {
        // 10k draws over 4 chunks: each count ~ Bin(10000, 1/4), sd = sqrt(1875).
        let d = four_chunks();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut counts = [0usize; 4];
        for _ in 0..10_000 {
            counts[sample_pair_hier(&d, &mut rng).unwrap().held_out] += 1;
        }
        let sd = 1875f64.sqrt();
        assert!(counts.iter().all(|&c| (c as f64 - 2500.0).abs() <= 3.0 * sd), "{counts:?}");
    }

    #[test]
    fn long_pair_offsets_and_lengths() {
        let d = doc(256);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = (0..100_000)
            .map(|_| sample_pair_long(&d, 128, 4096, &mut rng).unwrap())
            .find(|p| p.held_out == 0)
            .unwrap();
        assert_eq!(p.positive[1..], d.tokens[..128]);
        assert_eq!(p.anchor, Anchor::Reference([&[CLS][..], &d.tokens[128..]].concat()));

        let short = doc(200);
        for _ in 0..200 {
            let p = sample_pair_long(&short, 128, 4096, &mut rng).unwrap();
            assert!(p.held_out <= 72);
            let Anchor::Reference(r) = &p.anchor else { panic!() };
            assert_eq!(r.len(), 1 + 72);
        }
        assert!(sample_pair_long(&doc(128), 128, 4096, &mut rng).is_none());
        assert!(sample_pair_long(&doc(129), 128, 4096, &mut rng).is_some());
    }

    proptest! {
        #[test]
        fn long_pair_reinsertion_restores_document(len in 6usize..120, chunk_len in 1usize..6, seed in any::<u64>()) {
            let d = doc(len);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = sample_pair_long(&d, chunk_len, usize::MAX, &mut rng).unwrap();
            let Anchor::Reference(r) = &p.anchor else { panic!() };
            let mut rebuilt = r[1..].to_vec();
            let tail = rebuilt.split_off(p.held_out);
            rebuilt.extend_from_slice(&p.positive[1..]);
            rebuilt.extend(tail);
            prop_assert_eq!(rebuilt, d.tokens);
        }
    }

    #[test]
    fn repetition_rate_extremes_and_mean() {
        let tokens: Vec<usize> = (3..103).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(esimcse_augment(&tokens, 0.0, &mut rng), tokens);
        let doubled = esimcse_augment(&tokens, 1.0, &mut rng);
        assert_eq!(doubled.len(), 200);
        assert!(doubled.chunks(2).zip(&tokens).all(|(pair, &t)| pair == [t, t]));

        // Mean length over 1k samples: 100 * 1.15, sd of the mean ~ sqrt(100*.15*.85/1000).
        let mean = (0..1000).map(|_| esimcse_augment(&tokens, 0.15, &mut rng).len() as f64).sum::<f64>() / 1000.0;
        assert!((mean / 100.0 - 1.15).abs() < 0.005, "{mean}");
    }
}
