use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

use idnp::config::TrainConfig;
use idnp::corpus::{sample_episode, Subsequence};
use idnp::encoder::{multiscale_features, uniform_tensor, KernelBank};
use idnp::model::{Idnp, UserRef};
use idnp::numerics::{sinkhorn, ParamStore, Tape, Tensor};

fn bench_sinkhorn(c: &mut Criterion) {
    let mut group = c.benchmark_group("sinkhorn");
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for n in [64, 256, 1024] {
        let cost = Tensor::new(vec![n, n], (0..n * n).map(|_| rng.random_range(0.0..4.0)).collect()).unwrap();
        let w = vec![1.0 / n as f64; n];
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            b.iter(|| sinkhorn(&w, &w, black_box(&cost), 0.05, 200).unwrap())
        });
    }
    group.finish();
}

fn bench_multiscale(c: &mut Criterion) {
    let mut group = c.benchmark_group("multiscale_features");
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for window in [5, 10, 20] {
        let mut store = ParamStore::new();
        let gaps: Vec<usize> = (0..3).collect();
        let bank = KernelBank::init(&mut store, window, 32, 16, &gaps, &mut rng).unwrap();
        let p = uniform_tensor(vec![window, 32], 1.0, &mut rng);
        group.bench_with_input(BenchmarkId::from_parameter(window), &window, |b, _| {
            b.iter(|| {
                let mut t = Tape::with_params(&store);
                let pv = t.leaf(p.clone());
                let out = multiscale_features(&mut t, pv, &bank).unwrap();
                black_box(t.value(out).data()[0])
            })
        });
    }
    group.finish();
}

fn bench_episode(c: &mut Criterion) {
    let cfg = TrainConfig {
        d: 32,
        n_f: 16,
        d_r: 32,
        d_z: 32,
        ..TrainConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let items = 60;
    let model = Idnp::new(&cfg, items, 4, &mut rng).unwrap();
    let windows: Vec<Subsequence> = (0..16)
        .map(|start| Subsequence {
            user: 1,
            start,
            items: (0..cfg.window).map(|_| rng.random_range(1..=items)).collect(),
            next_items: vec![rng.random_range(1..=items)],
            next_rating: None,
        })
        .collect();
    let ep = sample_episode(1, windows.len(), cfg.nc_max, cfg.n_t, &mut rng).unwrap();
    let noise = model.draw_noise(&mut rng);
    c.bench_function("episode_forward_backward", |b| {
        b.iter(|| {
            let mut tape = Tape::with_params(&model.params);
            let (loss, _) = model.episode_loss(&mut tape, UserRef::Trained(1), &windows, &ep, &noise).unwrap();
            black_box(tape.backward(loss).unwrap())
        })
    });
}

criterion_group!(benches, bench_sinkhorn, bench_multiscale, bench_episode);
criterion_main!(benches);
