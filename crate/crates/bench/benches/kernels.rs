use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use drws::dr::{dr_step, solve, SolveSettings};
use drws::linalg::factorize;
use drws::predictor::{init_model, TrainConfig};
use drws::unroll::loss_and_gradient;
use drws::zoo::{sample_thetas, FamilySpec};

fn factorization(c: &mut Criterion) {
    let mut group = c.benchmark_group("factorize");
    for (n, m) in [(20, 30), (50, 75)] {
        let fam = FamilySpec::random_qp(n, m, 0).build().unwrap();
        let sys = fam.lcp(&sample_thetas(&fam, 1, 1)[0]).unwrap();
        let mut shifted = sys.matrix().clone();
        for i in 0..sys.dim() {
            shifted[(i, i)] += 1.0;
        }
        group.bench_with_input(BenchmarkId::from_parameter(sys.dim()), &shifted, |b, a| {
            b.iter(|| factorize(black_box(a)).unwrap())
        });
    }
    group.finish();
}

fn iterations(c: &mut Criterion) {
    let fam = FamilySpec::nnls(0).build().unwrap();
    let sys = fam.lcp(&sample_thetas(&fam, 1, 1)[0]).unwrap();
    let z = vec![0.5; sys.dim()];
    c.bench_function("dr_step/nnls", |b| {
        b.iter(|| dr_step(&sys, black_box(&z)).unwrap())
    });

    let settings = SolveSettings {
        kkt_stride: 0,
        ..SolveSettings::with_tol(1e-4, 20_000)
    };
    let cold = vec![0.0; sys.dim()];
    c.bench_function("solve/nnls_1e-4", |b| {
        b.iter(|| solve(&sys, black_box(&cold), &settings).unwrap())
    });

    c.bench_function("unroll/nnls_k15", |b| {
        b.iter(|| loss_and_gradient(&sys, black_box(&z), 15).unwrap())
    });
}

fn predictor(c: &mut Criterion) {
    let fam = FamilySpec::nnls(0).build().unwrap();
    let thetas = sample_thetas(&fam, 50, 2);
    let model = init_model(&fam, &thetas, &TrainConfig::default()).unwrap();
    let upstream = vec![1e-3; 100];
    c.bench_function("predict/nnls_100x100", |b| {
        b.iter(|| model.predict(black_box(&thetas[0])).unwrap())
    });
    c.bench_function("backward/nnls_100x100", |b| {
        b.iter(|| model.backward(black_box(&thetas[0]), &upstream).unwrap())
    });
}

criterion_group!(benches, factorization, iterations, predictor);
criterion_main!(benches);
