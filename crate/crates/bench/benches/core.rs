use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vedit_bench::DeskFixture;
use vedit_core::denoiser::{denoise_batch, draw_noise, DenoiseConfig};
use vedit_core::metrics::damerau_levenshtein;
use vedit_core::training::Trainer;
use vedit_core::RngSeed;

fn forward(c: &mut Criterion) {
    let fx = DeskFixture::new(32);
    let batch = fx.batch();
    let rope = batch.layout.rope(&fx.model.config, fx.model.dtype(), fx.model.device()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = draw_noise(batch.target_shape().unwrap(), fx.model.dtype(), fx.model.device(), &mut rng).unwrap();
    c.bench_function("model_forward/b32", |b| {
        b.iter(|| fx.model.forward(black_box(&x), &batch.seen, 0.5, &rope).unwrap())
    });
}

fn denoise(c: &mut Criterion) {
    let fx = DeskFixture::new(32);
    let batch = fx.batch();
    let mut group = c.benchmark_group("denoise/b32");
    group.sample_size(10);
    for (steps, scale) in [(1, 1.0), (24, 1.0), (24, 7.0)] {
        let dcfg = DenoiseConfig {
            steps,
            cfg_scale: scale,
            ..DenoiseConfig::default()
        };
        group.bench_with_input(BenchmarkId::from_parameter(format!("T{steps}_s{scale}")), &dcfg, |b, dcfg| {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            b.iter(|| denoise_batch(&batch, &fx.model, dcfg, &mut rng).unwrap())
        });
    }
    group.finish();
}

fn train_step(c: &mut Criterion) {
    let fx = DeskFixture::new(32);
    let cfg = &fx.config;
    let mut trainer =
        Trainer::new(fx.model.clone(), fx.head.clone(), cfg.train.clone(), cfg.cfg_scale, RngSeed(3), 2000).unwrap();
    let refs: Vec<_> = fx.examples.iter().collect();
    let mut group = c.benchmark_group("ce_step");
    group.sample_size(10);
    group.bench_function("b32_T24_s7", |b| b.iter(|| trainer.ce_step(&refs).unwrap()));
    group.finish();
}

fn edit_distance(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut seq = |n: usize| -> Vec<u8> { (0..n).map(|_| rng.random_range(0..12)).collect() };
    let pairs: Vec<_> = [8, 20, 64].into_iter().map(|n| (n, seq(n), seq(n))).collect();
    let mut group = c.benchmark_group("damerau_levenshtein");
    for (n, a, b) in &pairs {
        group.bench_with_input(BenchmarkId::from_parameter(n), &(a, b), |bch, (a, b)| {
            bch.iter(|| damerau_levenshtein(black_box(a), black_box(b)))
        });
    }
    group.finish();
}

criterion_group!(benches, forward, denoise, train_step, edit_distance);
criterion_main!(benches);
