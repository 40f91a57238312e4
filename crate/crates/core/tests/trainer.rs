//! Training-loop properties on a small synthetic benchmark.

use ftml_core::classifier::{backward, forward, Gradients, ModelParams};
use ftml_core::corpus::generate_synthetic;
use ftml_core::embedding::{read_embedding_file, Vocabulary};
use ftml_core::losses::LossConfig;
use ftml_core::rng;
use ftml_core::synonyms::{build_synonym_dict, sample_negatives, SynonymConfig, SynonymDict};
use ftml_core::trainer::{
    batch_gradients, read_checkpoint, train, write_checkpoint, BatchMetricMode, BatchNegatives, ObjectiveWeights, Optimizer, OptimizerKind,
    Trainer,
};
use ftml_core::{Dataset, Error, Example, GeneratorSpec, TrainConfig, TrainMode};

struct Bench {
    vocab: Vocabulary,
    dataset: Dataset,
    dict: SynonymDict,
    params: ModelParams,
}

fn bench() -> Bench {
    let dir = tempfile::tempdir().unwrap();
    let spec = GeneratorSpec {
        vocab_size: 300,
        train_size: 120,
        dev_size: 30,
        test_size: 30,
        ..GeneratorSpec::default()
    };
    generate_synthetic(&spec, 3, dir.path()).unwrap();
    let (cf_vocab, cf) = read_embedding_file(&dir.path().join("counter_fitted.txt")).unwrap();
    let (vocab, emb) = read_embedding_file(&dir.path().join("embeddings.txt")).unwrap();
    let dataset = Dataset::load_dir(dir.path(), &vocab).unwrap();
    let dict = build_synonym_dict(&cf_vocab, &cf, &vocab, SynonymConfig::default()).unwrap();
    let params = ModelParams::init(emb, 16, 2, 5).unwrap();
    Bench {
        vocab,
        dataset,
        dict,
        params,
    }
}

fn config(mode: TrainMode, epochs: usize) -> TrainConfig {
    TrainConfig {
        mode,
        epochs,
        lr: 0.01,
        seed: 42,
        ..TrainConfig::default()
    }
}

#[test]
fn runs_are_bit_reproducible() {
    let b = bench();
    let cfg = config(TrainMode::Ftml, 2);
    let (s1, m1) = train(&b.dataset, b.params.clone(), &b.dict, &cfg, |_| {}).unwrap();
    let (s2, m2) = train(&b.dataset, b.params.clone(), &b.dict, &cfg, |_| {}).unwrap();
    assert_eq!(m1, m2);
    assert_eq!(s1, s2);
    assert_eq!(m1.len(), 3);
    assert_eq!(m1.iter().map(|m| m.epoch).collect::<Vec<_>>(), vec![0, 1, 2]);
}

#[test]
fn resume_equals_uninterrupted_run() {
    let b = bench();
    for mode in [TrainMode::Ftml, TrainMode::Cml] {
        let two = config(mode, 2);
        let (full, full_metrics) = train(&b.dataset, b.params.clone(), &b.dict, &two, |_| {}).unwrap();

        let one = config(mode, 1);
        let (half, _) = train(&b.dataset, b.params.clone(), &b.dict, &one, |_| {}).unwrap();
        let mut bytes = Vec::new();
        write_checkpoint(&half, &b.vocab.digest(), &mut bytes).unwrap();
        let (restored, digest) = read_checkpoint(bytes.as_slice()).unwrap();
        assert_eq!(digest, b.vocab.digest());
        let mut trainer = Trainer::resume(&b.dataset, &b.dict, two.clone(), restored).unwrap();
        let m = trainer.run_epoch().unwrap();
        assert_eq!(&m, full_metrics.last().unwrap());
        assert_eq!(trainer.state(), &full);
    }
}

#[test]
fn frozen_mode_keeps_embedding_bit_identical() {
    let b = bench();
    let before = b.params.embedding.clone();
    let (state, metrics) = train(&b.dataset, b.params.clone(), &b.dict, &config(TrainMode::FrozenStandard, 2), |_| {}).unwrap();
    assert_eq!(state.params.embedding, before);
    assert!(state.params.w1 != b.params.w1);
    assert!(!state.optimizer.has_embedding_state());
    assert!(metrics.iter().all(|m| m.tr_loss == 0.0));
}

#[test]
fn standard_mode_ignores_beta() {
    let b = bench();
    let mut with_beta = config(TrainMode::Standard, 1);
    with_beta.beta = 100.0;
    let mut without = with_beta.clone();
    without.beta = 0.0;
    let (s1, m1) = train(&b.dataset, b.params.clone(), &b.dict, &with_beta, |_| {}).unwrap();
    let (s2, m2) = train(&b.dataset, b.params.clone(), &b.dict, &without, |_| {}).unwrap();
    assert_eq!(s1.params, s2.params);
    assert_eq!(m1, m2);
    assert!(m1.iter().all(|m| m.tr_loss == 0.0));
}

fn batch_and_negatives(b: &Bench) -> (Vec<&Example>, BatchNegatives) {
    let train = b.dataset.split("train").unwrap();
    let batch: Vec<&Example> = train[..8].to_vec();
    let mut rng = rng::stream(1, "test-negatives", 0);
    let negatives = batch
        .iter()
        .map(|ex| {
            ex.tokens
                .iter()
                .map(|&t| (!b.dict.synonyms(t).is_empty()).then(|| sample_negatives(&b.dict, t, &mut rng).unwrap()))
                .collect()
        })
        .collect();
    (batch, negatives)
}

#[test]
fn objective_gradient_is_additive() {
    let b = bench();
    let (batch, negs) = batch_and_negatives(&b);
    let loss = LossConfig {
        alpha: 2.0,
        ..LossConfig::default()
    };
    let run = |ce, beta| {
        batch_gradients(&b.params, &batch, &b.dict, &negs, &loss, ObjectiveWeights { ce, beta }, true, 200, BatchMetricMode::PerSentence)
            .unwrap()
            .grads
    };
    let both = run(1.0, 1.0);
    let ce_only = run(1.0, 0.0);
    let metric_only = run(0.0, 1.0);
    let mut sum = ce_only.clone();
    sum.add_scaled(&metric_only, 1.0);
    assert_eq!(both.embedding.keys().collect::<Vec<_>>(), sum.embedding.keys().collect::<Vec<_>>());
    for (w, g) in &both.embedding {
        for (x, y) in g.iter().zip(&sum.embedding[w]) {
            assert!((x - y).abs() <= 1e-12 * (1.0 + x.abs()), "row {w}");
        }
    }
    assert!(metric_only.w1.iter().all(|&x| x == 0.0));
}

#[test]
fn batch_gradient_is_mean_of_example_gradients() {
    let b = bench();
    let (batch, negs) = batch_and_negatives(&b);
    let out = batch_gradients(
        &b.params,
        &batch,
        &b.dict,
        &negs,
        &LossConfig::default(),
        ObjectiveWeights { ce: 1.0, beta: 0.0 },
        true,
        200,
        BatchMetricMode::PerSentence,
    )
    .unwrap();
    let mut expected = Gradients::zeros_like(&b.params);
    for ex in &batch {
        let (_, cache) = forward(&b.params, &ex.tokens).unwrap();
        expected.add_scaled(&backward(&b.params, &cache, ex.label, true).unwrap(), 1.0 / batch.len() as f64);
    }
    for (x, y) in out.grads.w1.iter().zip(expected.w1.iter()) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn untouched_rows_do_not_move() {
    let b = bench();
    let (batch, negs) = batch_and_negatives(&b);
    let mut touched = std::collections::BTreeSet::new();
    for (ex, row) in batch.iter().zip(&negs) {
        for (&t, n) in ex.tokens.iter().zip(row) {
            touched.insert(t);
            touched.extend(b.dict.synonyms(t));
            if let Some(n) = n {
                touched.extend(n.words());
            }
        }
    }
    let loss = LossConfig {
        alpha: 2.0,
        ..LossConfig::default()
    };
    let grads = batch_gradients(&b.params, &batch, &b.dict, &negs, &loss, ObjectiveWeights { ce: 1.0, beta: 1.0 }, true, 200, BatchMetricMode::PerSentence)
        .unwrap()
        .grads;
    for kind in [OptimizerKind::Adam, OptimizerKind::Sgd] {
        let cfg = TrainConfig {
            optimizer: kind,
            ..config(TrainMode::Ftml, 1)
        };
        let mut params = b.params.clone();
        let mut opt = Optimizer::new(&cfg, &params);
        opt.step(&mut params, &grads, true).unwrap();
        let mut moved = 0;
        for w in 0..params.vocab_size() {
            let same = params.embedding.row_slice(w) == b.params.embedding.row_slice(w);
            if !touched.contains(&w) {
                assert!(same, "{kind:?}: row {w} moved without being touched");
            } else if !same {
                moved += 1;
            }
        }
        assert!(moved > 0);
    }
}

#[test]
fn negative_resampling_modes_run_and_differ() {
    let b = bench();
    let mut results = Vec::new();
    for mode in ["per-step", "per-epoch", "fixed"] {
        let cfg = TrainConfig {
            negative_resample: mode.parse().unwrap(),
            ..config(TrainMode::Ftml, 2)
        };
        results.push(train(&b.dataset, b.params.clone(), &b.dict, &cfg, |_| {}).unwrap().0.params);
    }
    assert_ne!(results[0], results[1]);
    assert_ne!(results[1], results[2]);
}

#[test]
fn non_finite_loss_aborts_with_batch() {
    let b = bench();
    let mut params = b.params.clone();
    params.embedding.as_slice_mut().iter_mut().for_each(|x| *x *= 1e308);
    let err = train(&b.dataset, params, &b.dict, &config(TrainMode::Ftml, 1), |_| {}).unwrap_err();
    assert!(matches!(err, Error::NonFinite { epoch: 1, batch: 0, .. }), "{err}");
}

#[test]
fn vocabulary_mismatch_is_rejected() {
    let b = bench();
    let small = ModelParams::init(ftml_core::EmbeddingMatrix::zeros(10, 4), 4, 2, 0).unwrap();
    assert!(matches!(
        Trainer::new(&b.dataset, small, &b.dict, config(TrainMode::Ftml, 1)),
        Err(Error::VocabularyMismatch(_))
    ));
}
