use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use ftml_core::attack::{attack_greedy_saliency, AttackConfig};
use ftml_core::classifier::{backward, forward, ModelParams};
use ftml_core::corpus::load_tsv;
use ftml_core::embedding::parse_embedding_file;
use ftml_core::losses::{contrastive_loss, triplet_loss, LossConfig, LossVariant};
use ftml_core::rng;
use ftml_core::synonyms::{build_synonym_dict, sample_negatives, SynonymConfig};
use ftml_core::GeneratorSpec;
use ftml_core::SyntheticBenchmark;
use rand::Rng;

fn random_vectors(n: usize, dims: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = rng::stream(seed, "bench", 0);
    (0..n).map(|_| (0..dims).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
}

fn losses(c: &mut Criterion) {
    let vs = random_vectors(17, 32, 1);
    let pos: Vec<&[f64]> = vs[1..9].iter().map(Vec::as_slice).collect();
    let neg: Vec<&[f64]> = vs[9..].iter().map(Vec::as_slice).collect();
    let triplet = LossConfig {
        alpha: 3.0,
        ..LossConfig::default()
    };
    let contrastive = LossConfig {
        variant: LossVariant::Contrastive,
        ..triplet.clone()
    };
    c.bench_function("triplet_loss d32 k8", |b| b.iter(|| triplet_loss(black_box(&vs[0]), &pos, &neg, &triplet).unwrap()));
    c.bench_function("contrastive_loss d32 k8", |b| {
        b.iter(|| contrastive_loss(black_box(&vs[0]), &pos, &neg, &contrastive).unwrap())
    });
}

fn pipeline(c: &mut Criterion) {
    let spec = GeneratorSpec {
        vocab_size: 1000,
        train_size: 50,
        dev_size: 10,
        test_size: 50,
        ..GeneratorSpec::default()
    };
    let bench = SyntheticBenchmark::generate(&spec, 3).unwrap();
    let files = bench.render();
    let (cf_vocab, cf_matrix) = parse_embedding_file(files[0].1.as_bytes()).unwrap();
    let (vocab, matrix) = parse_embedding_file(files[1].1.as_bytes()).unwrap();
    let test = load_tsv(files[4].1.as_bytes(), &vocab).unwrap();

    c.bench_function("build_synonym_dict v1000", |b| {
        b.iter(|| build_synonym_dict(&cf_vocab, &cf_matrix, &vocab, SynonymConfig::default()).unwrap())
    });
    let dict = build_synonym_dict(&cf_vocab, &cf_matrix, &vocab, SynonymConfig::default()).unwrap();

    let mut rng = rng::stream(3, "bench", 1);
    c.bench_function("sample_negatives k8", |b| b.iter(|| sample_negatives(&dict, black_box(5), &mut rng).unwrap()));

    let params = ModelParams::init(matrix, 64, 2, 3).unwrap();
    let ex = &test.examples[0];
    c.bench_function("forward+backward", |b| {
        b.iter(|| {
            let (_, cache) = forward(&params, black_box(&ex.tokens)).unwrap();
            backward(&params, &cache, ex.label, true).unwrap()
        })
    });

    let config = AttackConfig::default();
    c.bench_function("greedy attack one example", |b| {
        b.iter(|| attack_greedy_saliency(&params, &dict, black_box(&ex.tokens), ex.label, &config).unwrap())
    });
}

criterion_group!(benches, losses, pipeline);
criterion_main!(benches);
