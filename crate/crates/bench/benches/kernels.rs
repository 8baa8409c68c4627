use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use timescale::harness::Trainer;
use timescale::{adamw_update, relative_update_size_mc, HyperParams, OptState, ScheduleSpec, Tensor};
use timescale_bench::{bindings, mlp_config};

fn adamw(c: &mut Criterion) {
    let mut group = c.benchmark_group("adamw_update");
    for n in [1_000usize, 100_000] {
        let hp = HyperParams::new(1e-3, 0.1, ScheduleSpec::cosine_to_zero(1_000_000));
        let g = Tensor::from_vec((0..n).map(|i| ((i % 17) as f64 - 8.0) * 1e-2).collect());
        let mut w = Tensor::from_vec((0..n).map(|i| ((i % 13) as f64 - 6.0) * 1e-1).collect());
        let mut state = OptState::new(&[n]);
        group.bench_function(BenchmarkId::from_parameter(n), |b| {
            b.iter(|| adamw_update("w", &mut state, &mut w, black_box(&g), &hp).unwrap())
        });
    }
    group.finish();
}

fn mlp(c: &mut Criterion) {
    let mut group = c.benchmark_group("si_mlp");
    for width in [32usize, 128] {
        let trainer = Trainer::new(&mlp_config(width, 100)).unwrap();
        let net = trainer.net();
        let bound = bindings(&trainer);
        group.bench_function(BenchmarkId::new("forward", width), |b| {
            b.iter(|| net.graph.forward(black_box(&bound)).unwrap())
        });
        group.bench_function(BenchmarkId::new("forward_backward", width), |b| {
            b.iter(|| {
                let eval = net.graph.forward(black_box(&bound)).unwrap();
                net.graph.backward(&eval, net.loss, trainer.params()).unwrap()
            })
        });
        let mut stepping = Trainer::new(&mlp_config(width, 100)).unwrap();
        group.bench_function(BenchmarkId::new("train_step", width), |b| {
            b.iter(|| stepping.step().unwrap())
        });
    }
    group.finish();
}

fn monte_carlo(c: &mut Criterion) {
    let mut group = c.benchmark_group("relative_update_size_mc");
    group.sample_size(10);
    for gamma in [0.01, 0.1] {
        group.bench_function(BenchmarkId::from_parameter(gamma), |b| {
            b.iter(|| relative_update_size_mc(gamma, 1.0, 100_000, 0).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, adamw, mlp, monte_carlo);
criterion_main!(benches);
