//! Invariants of the losses, the classifier and the file formats.

use ftml_core::classifier::{forward, ModelParams};
use ftml_core::embedding::{parse_embedding_file, read_snapshot, write_embedding_file, write_snapshot, Vocabulary};
use ftml_core::losses::{metric_loss, sentence_metric_penalty, word_loss, AvgMode, LossConfig, LossVariant, Norm};
use ftml_core::synonyms::{NegativeSet, SynonymConfig, SynonymDict};
use ftml_core::{EmbeddingMatrix, EmbeddingSnapshot, SnapshotMeta};
use proptest::prelude::*;

fn vector(dims: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0f64..2.0, dims)
}

fn triple() -> impl Strategy<Value = (Vec<f64>, Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    (2usize..6).prop_flat_map(|d| (vector(d), prop::collection::vec(vector(d), 1..5), prop::collection::vec(vector(d), 1..5)))
}

fn norm() -> impl Strategy<Value = Norm> {
    prop_oneof![Just(Norm::L1), Just(Norm::L2), Just(Norm::LInf)]
}

fn variant() -> impl Strategy<Value = LossVariant> {
    prop_oneof![Just(LossVariant::Triplet), Just(LossVariant::Contrastive)]
}

fn value(a: &[f64], pos: &[Vec<f64>], neg: &[Vec<f64>], cfg: &LossConfig) -> f64 {
    let p: Vec<&[f64]> = pos.iter().map(Vec::as_slice).collect();
    let n: Vec<&[f64]> = neg.iter().map(Vec::as_slice).collect();
    metric_loss(a, &p, &n, cfg).unwrap().value
}

proptest! {
    #[test]
    fn losses_are_translation_invariant((a, pos, neg) in triple(), p in norm(), v in variant(), shift in -5.0f64..5.0) {
        let cfg = LossConfig { p, alpha: 2.0, variant: v, tau: 1.0, ..LossConfig::default() };
        let moved = |x: &Vec<f64>| x.iter().map(|c| c + shift).collect::<Vec<f64>>();
        let base = value(&a, &pos, &neg, &cfg);
        let shifted = value(&moved(&a), &pos.iter().map(moved).collect::<Vec<_>>(), &neg.iter().map(moved).collect::<Vec<_>>(), &cfg);
        prop_assert!((base - shifted).abs() <= 1e-9 * (1.0 + base.abs()));
    }

    #[test]
    fn losses_ignore_set_order((a, pos, neg) in triple(), p in norm(), v in variant()) {
        let cfg = LossConfig { p, alpha: 2.0, variant: v, tau: 1.0, ..LossConfig::default() };
        let mut rpos = pos.clone();
        rpos.reverse();
        let mut rneg = neg.clone();
        rneg.rotate_left(1);
        let base = value(&a, &pos, &neg, &cfg);
        prop_assert!((base - value(&a, &rpos, &rneg, &cfg)).abs() <= 1e-12 * (1.0 + base.abs()));
    }

    #[test]
    fn triplet_is_bounded_by_margin_terms((a, pos, neg) in triple(), p in norm(), alpha in 0.0f64..4.0) {
        // mean_pos d − mean_neg min(d, α) + α lies in [mean_pos d, mean_pos d + α]
        let cfg = LossConfig { p, alpha, ..LossConfig::default() };
        let d = |u: &Vec<f64>| ftml_core::losses::word_distance(&a, u, p).unwrap();
        let mean_pos = pos.iter().map(d).sum::<f64>() / pos.len() as f64;
        let v = value(&a, &pos, &neg, &cfg);
        prop_assert!(v >= mean_pos - 1e-12 && v <= mean_pos + alpha + 1e-12);
    }

    #[test]
    fn norms_are_ordered(u in vector(4), v in vector(4)) {
        let d = |p| ftml_core::losses::word_distance(&u, &v, p).unwrap();
        prop_assert!(d(Norm::LInf) <= d(Norm::L2) + 1e-12);
        prop_assert!(d(Norm::L2) <= d(Norm::L1) + 1e-12);
    }

    #[test]
    fn probabilities_form_a_distribution(seed in 0u64..500, tokens in prop::collection::vec(0usize..20, 1..12)) {
        let emb = EmbeddingMatrix::from_rows(&(0..20).map(|i| (0..6).map(|j| ((i * 7 + j * 3) % 11) as f64 / 5.0 - 1.0).collect()).collect::<Vec<Vec<f64>>>()).unwrap();
        let params = ModelParams::init(emb, 8, 3, seed).unwrap();
        let (p, _) = forward(&params, &tokens).unwrap();
        prop_assert!((p.sum() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|&x| x >= 0.0));
        let mut reversed = tokens.clone();
        reversed.reverse();
        let (q, _) = forward(&params, &reversed).unwrap();
        for (x, y) in p.iter().zip(q.iter()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }
}

fn toy_dict() -> (EmbeddingMatrix, SynonymDict) {
    let rows: Vec<Vec<f64>> = (0..8).map(|i| vec![i as f64, (i * i % 5) as f64 * 0.5]).collect();
    let matrix = EmbeddingMatrix::from_rows(&rows).unwrap();
    let sets = vec![vec![], vec![2, 3], vec![1], vec![1], vec![], vec![6], vec![5], vec![]];
    let dict = SynonymDict::from_sets(sets, SynonymConfig::default(), "").unwrap();
    (matrix, dict)
}

#[test]
fn sentence_penalty_is_the_average_of_word_losses() {
    let (matrix, dict) = toy_dict();
    let tokens = [1, 4, 5, 1, 7];
    let negatives = |pos: usize| NegativeSet::new(vec![(pos + 4) % 8, 7 - pos % 3]);
    for mode in [AvgMode::NonEmpty, AvgMode::All] {
        let cfg = LossConfig {
            alpha: 3.0,
            avg_mode: mode,
            ..LossConfig::default()
        };
        let mut calls = Vec::new();
        let out = sentence_metric_penalty(
            &tokens,
            &matrix,
            &dict,
            |pos, w| {
                calls.push((pos, w));
                Ok(negatives(pos))
            },
            &cfg,
        )
        .unwrap();
        assert_eq!(calls, vec![(0, 1), (2, 5), (3, 1)]);

        let n = if mode == AvgMode::NonEmpty { 3.0 } else { 5.0 };
        let terms: Vec<_> = calls.iter().map(|&(pos, w)| word_loss(&matrix, w, dict.synonyms(w), &negatives(pos), &cfg).unwrap()).collect();
        let expected = terms.iter().map(|t| t.value).sum::<f64>() / n;
        assert!((out.value - expected).abs() < 1e-12);
        for w in 0..8 {
            let g: Vec<f64> = (0..2).map(|j| terms.iter().filter_map(|t| t.grads.get(&w)).map(|g| g[j]).sum::<f64>() / n).collect();
            match out.grads.get(&w) {
                Some(got) => assert!(got.iter().zip(&g).all(|(a, b)| (a - b).abs() < 1e-12), "word {w}"),
                None => assert!(g.iter().all(|&x| x == 0.0), "word {w} missing"),
            }
        }
    }
}

#[test]
fn sentence_without_synonyms_contributes_nothing() {
    let (matrix, dict) = toy_dict();
    let out = sentence_metric_penalty(&[0, 4, 7], &matrix, &dict, |_, _| panic!("no sampling expected"), &LossConfig::default()).unwrap();
    assert_eq!(out.value, 0.0);
    assert!(out.grads.is_empty());
}

#[test]
fn fifty_word_files_round_trip() {
    let spec = ftml_core::GeneratorSpec {
        vocab_size: 50,
        train_size: 10,
        dev_size: 2,
        test_size: 2,
        ..Default::default()
    };
    let bench = ftml_core::SyntheticBenchmark::generate(&spec, 4).unwrap();
    let files = bench.render();
    let (vocab, matrix) = parse_embedding_file(files[1].1.as_bytes()).unwrap();
    assert_eq!(vocab.len(), 51);
    for (i, row) in bench.emb_vectors.iter().enumerate() {
        assert_eq!(matrix.row_slice(i + 1), row.as_slice());
    }

    let mut text = Vec::new();
    write_embedding_file(&vocab, &matrix, &mut text).unwrap();
    let (vocab2, matrix2) = parse_embedding_file(text.as_slice()).unwrap();
    assert_eq!(vocab2, vocab);
    assert_eq!(matrix2, matrix);

    let snapshot = EmbeddingSnapshot {
        vocabulary: vocab.clone(),
        matrix,
        meta: SnapshotMeta {
            source: "test".into(),
            config_digest: "abc".into(),
            epoch: 3,
        },
    };
    let mut bin = Vec::new();
    write_snapshot(&snapshot, &mut bin).unwrap();
    assert_eq!(read_snapshot(bin.as_slice()).unwrap(), snapshot);
    assert!(read_snapshot(&bin[..bin.len() - 1]).is_err());
    assert_eq!(Vocabulary::from_words(vocab.words()[1..].iter()).unwrap(), vocab);
}
