use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use simcse_core::losses::{infonce_loss, supervised_loss};
use simcse_core::numerics::{gram_sum, normalize_rows, singular_values, spearman};
use simcse_core::{DropoutPlan, EmbeddingBatch, EncoderConfig, EncoderModel, LossConfig, Mat, Phase, TokenBatch};

fn random_mat(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Mat {
    Mat::new(n, d, (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn losses(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cfg = LossConfig::default();
    let mut group = c.benchmark_group("loss");
    for n in [32, 128] {
        let b = EmbeddingBatch::new(random_mat(&mut rng, n, 64), random_mat(&mut rng, n, 64), None).unwrap();
        group.bench_with_input(BenchmarkId::new("infonce", n), &b, |bench, b| {
            bench.iter(|| infonce_loss(black_box(b), &cfg).unwrap())
        });
        let b = EmbeddingBatch::new(
            random_mat(&mut rng, n, 64),
            random_mat(&mut rng, n, 64),
            Some(random_mat(&mut rng, n, 64)),
        )
        .unwrap();
        group.bench_with_input(BenchmarkId::new("supervised", n), &b, |bench, b| {
            bench.iter(|| supervised_loss(black_box(b), &cfg).unwrap())
        });
    }
    group.finish();
}

fn spectra(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let w = normalize_rows(&random_mat(&mut rng, 512, 32)).unwrap();
    c.bench_function("singular_values 512x32", |b| b.iter(|| singular_values(black_box(&w)).unwrap()));
    c.bench_function("gram_sum 512x32", |b| b.iter(|| gram_sum(black_box(&w))));
    let x: Vec<f64> = (0..2000).map(|_| rng.random_range(0..50) as f64).collect();
    let y: Vec<f64> = (0..2000).map(|_| rng.random_range(0..50) as f64).collect();
    c.bench_function("spearman 2000 tied", |b| b.iter(|| spearman(black_box(&x), black_box(&y)).unwrap()));
}

fn encoder(c: &mut Criterion) {
    let cfg = EncoderConfig::default();
    let vocab = cfg.vocab_size as u32;
    let model = EncoderModel::init(cfg, 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let sentences: Vec<Vec<u32>> = (0..32)
        .map(|_| (0..rng.random_range(5..12)).map(|_| rng.random_range(4..vocab)).collect())
        .collect();
    let batch = TokenBatch::from_sentences(&sentences).unwrap();
    let plan = DropoutPlan::none();
    c.bench_function("encoder forward 32", |b| {
        b.iter(|| model.encode(black_box(&batch), &plan, Phase::Eval).unwrap())
    });
    let upstream = random_mat(&mut rng, 32, model.config.d_model);
    c.bench_function("encoder forward+backward 32", |b| {
        b.iter(|| model.encode_with_grad(black_box(&batch), &plan, &upstream).unwrap())
    });
}

criterion_group!(benches, losses, spectra, encoder);
criterion_main!(benches);
