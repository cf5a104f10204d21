use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use nalgebra::{DMatrix, DVector};
use tracksplit::diagnostics::{check_three_point_descent, sample_box};
use tracksplit::inner::{estimate_inner_contraction, InnerMethod};
use tracksplit::operators::SymOperator;
use tracksplit::par::Execution;
use tracksplit::problems::make_parametric_poisson;

fn modes() -> Vec<(&'static str, Execution)> {
    let mut m = vec![("sequential", Execution::Sequential)];
    if Execution::parallel_available() {
        m.push(("parallel", Execution::Parallel));
    }
    m
}

fn sampled_lemma(c: &mut Criterion) {
    let dim = 32;
    let q = {
        let a = DMatrix::from_fn(dim, dim, |i, j| ((i * 7 + j * 3) % 11) as f64 / 11.0 - 0.5);
        SymOperator::new(a.transpose() * &a + DMatrix::identity(dim, dim)).unwrap()
    };
    let qm = q.matrix().clone();
    let abs_q = q.young_companion().unwrap();
    let triples: Vec<_> = (0..10_000)
        .map(|i| {
            (
                sample_box(0, 3 * i, dim, -1.0, 1.0),
                sample_box(0, 3 * i + 1, dim, -1.0, 1.0),
                sample_box(0, 3 * i + 2, dim, -1.0, 1.0),
            )
        })
        .collect();
    let mut group = c.benchmark_group("three_point_descent_10k");
    for (name, exec) in modes() {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| {
                check_three_point_descent(
                    |x: &DVector<f64>| 0.5 * x.dot(&(&qm * x)),
                    |x: &DVector<f64>| &qm * x,
                    &q,
                    &q,
                    &abs_q,
                    0.5,
                    &triples,
                    exec,
                )
                .unwrap()
            })
        });
    }
    group.finish();
}

fn contraction_estimate(c: &mut Criterion) {
    let inst = make_parametric_poisson(24, [[0.8, 1.2], [1.3, 1.7]]).unwrap();
    let mut group = c.benchmark_group("jacobi_contraction_poisson24");
    group.sample_size(10);
    for (name, exec) in modes() {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| estimate_inner_contraction(&InnerMethod::Jacobi, &inst, 1, 0, exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, sampled_lemma, contraction_estimate);
criterion_main!(benches);
