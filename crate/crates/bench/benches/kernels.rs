use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use snapdoa_bench::snapshots;
use snapdoa_core::covariance::{coarray_augment, sample_scm};
use snapdoa_core::subspace::{coarray_root_music, hermitian_eigen, root_music};
use snapdoa_core::{SnapTfConfig, SnapTfModel};

fn eigen(c: &mut Criterion) {
    let mut group = c.benchmark_group("hermitian_eigen");
    for geometry in ["ula16", "ula64"] {
        let (_, y) = snapshots(geometry, 200);
        let scm = sample_scm(&y).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(geometry), &scm.mat, |b, m| {
            b.iter(|| hermitian_eigen(black_box(m)).unwrap())
        });
    }
    group.finish();
}

fn subspace(c: &mut Criterion) {
    let (geom, y) = snapshots("mra5", 50);
    let scm = sample_scm(&y).unwrap();
    let aug = coarray_augment(&scm, &geom).unwrap();
    c.bench_function("sample_scm/mra5_t50", |b| b.iter(|| sample_scm(black_box(&y)).unwrap()));
    c.bench_function("root_music/n10_k3", |b| b.iter(|| root_music(black_box(&aug), 3).unwrap()));
    c.bench_function("coarray_root_music/mra5_t50", |b| {
        b.iter(|| coarray_root_music(&geom, black_box(&y), 3).unwrap())
    });
}

fn snap_tf(c: &mut Criterion) {
    let model = SnapTfModel::init(SnapTfConfig::modulated(5, 9), 1).unwrap();
    let mut group = c.benchmark_group("snap_tf_forward");
    for t in [10, 50, 100] {
        let (_, y) = snapshots("mra5", t);
        group.bench_with_input(BenchmarkId::from_parameter(t), &y, |b, y| {
            b.iter(|| model.predict(black_box(y)).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, eigen, subspace, snap_tf);
criterion_main!(benches);
