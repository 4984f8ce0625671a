use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use pdmp_core::flow::flow_with_jacobian;
use pdmp_core::{affine_flow, example, flow, VectorFieldSpec};

fn flows(c: &mut Criterion) {
    let v = example::field_v();
    let nonlinear = VectorFieldSpec::expression("n", &["-x1 + sin(x2)", "-x2 + x1*x2"]).unwrap();
    let a = nalgebra::DMatrix::from_row_slice(2, 2, &[-1.0, 1.0, -1.0, -1.0]);
    let x = [0.4, -0.3];

    let mut g = c.benchmark_group("flow");
    g.bench_function("rk4_affine_t5_h1e-3", |b| {
        b.iter(|| flow(&v, black_box(&x), 5.0, 1e-3).unwrap())
    });
    g.bench_function("rk4_expression_t5_h1e-3", |b| {
        b.iter(|| flow(&nonlinear, black_box(&x), 5.0, 1e-3).unwrap())
    });
    g.bench_function("rk4_with_jacobian_t5_h1e-3", |b| {
        b.iter(|| flow_with_jacobian(&v, black_box(&x), 5.0, 1e-3).unwrap())
    });
    g.bench_function("matrix_exponential_t5", |b| {
        b.iter(|| affine_flow(&a, &[0.0, 0.0], black_box(&x), 5.0))
    });
    g.finish();
}

criterion_group!(benches, flows);
criterion_main!(benches);
