use std::collections::HashSet;

use ctxlm::corpus::{build_context_windows, chunk_article, content, Vocabulary, PAD};
use ctxlm::retrieval::{lcs_tokens, overlap_ok, Bm25Index, VectorIndex};
use ctxlm::{Model, ModelConfig};
use ndarray::{Array1, Array2};
use proptest::prelude::*;

fn tokens(max: usize) -> impl Strategy<Value = Vec<u32>> {
    proptest::collection::vec(4u32..20, 0..max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn vector_topk_ignores_appended_excluded_rows(
        rows in proptest::collection::vec(proptest::collection::vec(-4i8..4, 3), 1..20),
        extra in proptest::collection::vec(proptest::collection::vec(-9i8..9, 3), 1..5),
        q in proptest::collection::vec(-3i8..3, 3),
        k in 0usize..25,
    ) {
        let to_array = |r: &[Vec<i8>]| Array2::from_shape_fn((r.len(), 3), |(i, j)| r[i][j] as f32);
        let q = Array1::from_iter(q.iter().map(|&v| v as f32));
        let base = VectorIndex::new(to_array(&rows)).unwrap().topk(q.view(), k, &HashSet::new());
        let mut all = rows.clone();
        all.extend(extra.iter().cloned());
        let excluded: HashSet<usize> = (rows.len()..all.len()).collect();
        let grown = VectorIndex::new(to_array(&all)).unwrap().topk(q.view(), k, &excluded);
        prop_assert_eq!(base, grown);
    }

    #[test]
    fn bm25_ignores_query_order_and_duplicates(
        docs in proptest::collection::vec(proptest::collection::vec(4u32..15, 1..12), 1..15),
        query in tokens(8),
        k in 0usize..20,
    ) {
        let index = Bm25Index::build(&docs).unwrap();
        let mut shuffled = query.clone();
        shuffled.reverse();
        shuffled.extend(query.iter().copied());
        shuffled.push(PAD);
        prop_assert_eq!(index.topk(&query, k), index.topk(&shuffled, k));
        prop_assert!(index.score_all(&query).iter().all(|s| s.is_finite() && *s >= 0.0));
    }

    #[test]
    fn lcs_is_symmetric_and_bounded(a in tokens(25), b in tokens(25)) {
        let l = lcs_tokens(&a, &b);
        prop_assert_eq!(l, lcs_tokens(&b, &a));
        prop_assert!(l <= a.len().min(b.len()));
        prop_assert_eq!(lcs_tokens(&a, &a), a.len());
        prop_assert_eq!(overlap_ok(&a, &b, l), true);
        prop_assert_eq!(overlap_ok(&a, &b, l.saturating_sub(1)), l == 0);
    }

    #[test]
    fn windows_cover_the_article(article in tokens(80), stride in 1usize..9, extra in 0usize..9) {
        let w = stride + extra;
        let windows = build_context_windows(&article, w, stride, 0).unwrap();
        let mut covered = vec![false; article.len()];
        for win in &windows {
            prop_assert_eq!(win.start % stride, 0);
            prop_assert_eq!(win.tokens.len(), w);
            let body: Vec<u32> = content(&win.tokens).collect();
            prop_assert_eq!(&body[..], &article[win.start..win.start + body.len()]);
            for c in covered.iter_mut().skip(win.start).take(body.len()) {
                *c = true;
            }
        }
        prop_assert!(covered.into_iter().all(|c| c));
    }

    #[test]
    fn chunks_reassemble_the_article(article in tokens(70), s in 1usize..10, n in 0usize..12) {
        let chunks = chunk_article(&article, s, n, 0).unwrap();
        let joined: Vec<u32> = chunks.iter().flat_map(|c| content(&c.target).collect::<Vec<_>>()).collect();
        prop_assert_eq!(&joined, &article);
        for c in &chunks {
            prop_assert_eq!(c.input.len(), n);
            prop_assert_eq!(c.target.len(), s);
            let start = c.chunk_index * s;
            let before: Vec<u32> = content(&c.input).collect();
            prop_assert_eq!(&before[..], &article[start.saturating_sub(n)..start]);
        }
    }

    #[test]
    fn vocabulary_ids_are_bijective(words in proptest::collection::vec("[a-z]{1,4}", 1..30)) {
        let text = words.join(" ");
        let vocab = Vocabulary::build(&[text.clone()]).unwrap();
        for id in 4..vocab.size() as u32 {
            prop_assert_eq!(vocab.id(vocab.token(id)), Some(id));
        }
        prop_assert_eq!(vocab.detokenize(&vocab.tokenize(&text)), text);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn logits_are_causal(
        x in proptest::collection::vec(4u32..30, 1..6),
        y in proptest::collection::vec(4u32..30, 2..5),
        pos in 0usize..4,
        replacement in 4u32..30,
    ) {
        let cfg = ModelConfig {
            vocab_size: 30,
            d_model: 8,
            n_heads: 2,
            n_enc_layers: 1,
            n_dec_layers: 1,
            d_ff: 16,
            max_ctx_len: 6,
            max_input_len: 6,
            max_target_len: 5,
            k_contexts: 1,
        };
        let m = Model::<f64>::init(cfg, 5).unwrap();
        let pos = pos % y.len();
        let mut changed = y.clone();
        changed[pos] = replacement;
        let a = m.decode_logits(&x, &y, &[]).unwrap();
        let b = m.decode_logits(&x, &changed, &[]).unwrap();
        // row r of the decoder sequence sees BOS, x and y up to r - 1 - |x|
        let visible = 1 + x.len() + pos;
        for r in 0..visible {
            prop_assert_eq!(a.row(r), b.row(r));
        }
    }
}
