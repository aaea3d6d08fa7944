use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use locprod_bench::locprod::estimator::{cross_validate, full_fit, CvStep};
use locprod_bench::locprod::inference::{plans_for, wild_bootstrap_with_plans, Functional};
use locprod_bench::synthetic;

fn fit(c: &mut Criterion) {
    let mut g = c.benchmark_group("full_fit");
    for n in [100, 400] {
        let (panel, bw, tech) = synthetic(n);
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            b.iter(|| full_fit(&panel, bw, &tech).unwrap())
        });
    }
    g.finish();
}

fn bootstrap(c: &mut Criterion) {
    let (panel, bw, tech) = synthetic(200);
    let fit = full_fit(&panel, bw, &tech).unwrap();
    let plans = plans_for(&panel, &fit).unwrap();
    let f = Functional::all_coefficients(&fit);
    c.bench_function("bootstrap_replicate_n200", |b| {
        b.iter(|| wild_bootstrap_with_plans(&panel, &fit, &plans, 1, 3, &f).unwrap())
    });
}

fn cv(c: &mut Criterion) {
    let (panel, _, tech) = synthetic(100);
    let grid = [40, 80, 160, 320];
    let mut g = c.benchmark_group("cross_validate_n100");
    g.sample_size(10);
    g.bench_function("first", |b| {
        b.iter(|| cross_validate(&panel, CvStep::First, &grid, &tech, None).unwrap())
    });
    g.finish();
}

criterion_group!(benches, fit, bootstrap, cv);
criterion_main!(benches);
