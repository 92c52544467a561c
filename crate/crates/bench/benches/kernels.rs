use std::hint::black_box;

use binmask::nn::{loss_and_grad, LossKind, Mode};
use binmask::{auc, MaskHyper, MaskState};
use binmask_bench::step_workload;
use criterion::{criterion_group, criterion_main, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn forward_backward(c: &mut Criterion) {
    let (mut trainer, x, y) = step_workload(None);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    c.bench_function("forward_backward_2x64_b256", |b| {
        b.iter(|| {
            let net = trainer.network_mut();
            let logits = net.forward(&x, Mode::Train, &mut rng).unwrap();
            let (_, d) = loss_and_grad(&logits, &y, LossKind::SoftmaxCrossEntropy).unwrap();
            net.backward(&d).unwrap();
            black_box(net.params()[0].grad()[0])
        })
    });
}

fn train_step(c: &mut Criterion) {
    let mut g = c.benchmark_group("train_step_2x64_b256");
    let (mut dense, x, y) = step_workload(None);
    g.bench_function("dense", |b| b.iter(|| black_box(dense.step(&x, &y).unwrap())));
    let (mut masked, x, y) = step_workload(Some(1e-4));
    g.bench_function("binmask", |b| b.iter(|| black_box(masked.step(&x, &y).unwrap())));
    g.finish();
}

fn mask_update(c: &mut Criterion) {
    let n = 100_000;
    let mut state = MaskState::new(n, MaskHyper::default(), 1e-4).unwrap();
    state.set_frozen(false);
    let grad: Vec<f64> = (0..n).map(|i| ((i % 7) as f64 - 3.0) * 1e-3).collect();
    c.bench_function("mask_update_100k", |b| b.iter(|| state.mask_update(black_box(&grad), 1e-3).unwrap()));
}

fn auc_bench(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let scores: Vec<f64> = (0..10_000).map(|_| rng.random()).collect();
    let labels: Vec<usize> = (0..10_000).map(|_| rng.random_range(0..2)).collect();
    c.bench_function("auc_10k", |b| b.iter(|| auc(black_box(&scores), black_box(&labels)).unwrap()));
}

criterion_group!(benches, forward_backward, train_step, mask_update, auc_bench);
criterion_main!(benches);
