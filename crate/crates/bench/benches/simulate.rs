use criterion::{criterion_group, criterion_main, Criterion};
use pdmp_bench::example_config;
use pdmp_core::{estimate_density, simulate};

fn simulation(c: &mut Criterion) {
    let mut g = c.benchmark_group("simulate");
    g.sample_size(20);
    let single = example_config(100.0, 1e-2);
    g.bench_function("trajectory_t100_h1e-2", |b| b.iter(|| simulate(&single).unwrap()));
    let batch = example_config(200.0, 1e-2);
    g.bench_function("density_16traj_t200_64cells", |b| {
        b.iter(|| estimate_density(&batch, 64, 16, 1).unwrap())
    });
    g.finish();
}

criterion_group!(benches, simulation);
criterion_main!(benches);
