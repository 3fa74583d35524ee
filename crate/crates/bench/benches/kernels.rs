use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use epictrl_core::{
    compute_separatrix, run_filling_the_box, simulate, value_function, ControlSignal, EpidemicState, GeometryCache,
    IntegratorConfig, ModelInstance, RateModel, Stop,
};

fn fig1() -> ModelInstance {
    ModelInstance::new(RateModel::fig1(), 0.05).unwrap()
}

fn kernels(c: &mut Criterion) {
    let m = fig1();
    let cfg = IntegratorConfig::default();
    let s0 = EpidemicState { x: 0.99, y: 0.01 };
    let g = GeometryCache::new(&m, 0.2, &cfg).unwrap();

    c.bench_function("rk4_uncontrolled_to_extinction", |b| {
        b.iter(|| simulate(&m, &ControlSignal::Zero, black_box(s0), &cfg, Stop::Extinction).unwrap())
    });
    c.bench_function("separatrix_fig1", |b| {
        b.iter(|| compute_separatrix(&m, black_box(0.2), &cfg).unwrap())
    });
    c.bench_function("hitting_abscissa", |b| b.iter(|| g.h(black_box(s0)).unwrap()));
    c.bench_function("value_function", |b| {
        b.iter(|| value_function(&g, black_box(s0)).unwrap())
    });
    c.bench_function("filling_the_box_run", |b| {
        b.iter(|| run_filling_the_box(&g, black_box(s0), &cfg).unwrap())
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = kernels
}
criterion_main!(benches);
