use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use cclab::calibration::{build_calibration_with, CalibrationOptions};
use cclab::diameter::{ball_diameter_certificate_c11, safe_radius};
use cclab::distance::{distance_upper, UpperOptions};
use cclab::hamiltonian::integrate_extremal;
use cclab::quasicalib::{build_quasicalibration_with, QuasiOptions};
use cclab::{builtin, CotangentState};

fn extremal(c: &mut Criterion) {
    let s = builtin("martinet").unwrap();
    let st = CotangentState::new(vec![0.0; 3], vec![0.6, 0.8, 3.0]);
    c.bench_function("extremal/martinet/1000", |b| {
        b.iter(|| integrate_extremal(&s, black_box(&st), 1.0, 1000).unwrap())
    });
}

fn calibration(c: &mut Criterion) {
    let s = builtin("heisenberg").unwrap();
    let opts = CalibrationOptions::default();
    let mut g = c.benchmark_group("calibration");
    g.sample_size(10);
    g.bench_function("build/heisenberg", |b| {
        b.iter(|| build_calibration_with(&s, black_box(&[0.0; 3]), &opts).unwrap())
    });
    let cf = build_calibration_with(&s, &[0.0; 3], &opts).unwrap();
    g.bench_function("invert/heisenberg", |b| {
        b.iter(|| cf.invert(black_box(&[0.01, -0.02, 0.005])).unwrap())
    });
    g.finish();
}

fn certificate(c: &mut Criterion) {
    let s = builtin("heisenberg").unwrap();
    let q = [0.0; 3];
    let cf = build_calibration_with(&s, &q, &CalibrationOptions::default()).unwrap();
    let r = 0.5 * safe_radius(&s, &q, &cf.w_box).unwrap().min(cf.eps());
    c.bench_function("certificate/c11/heisenberg", |b| {
        b.iter(|| ball_diameter_certificate_c11(&s, &cf, 1.0, black_box(&q), r, 1e-3 * r).unwrap())
    });
    let g = builtin("grushin").unwrap();
    let opts = QuasiOptions {
        sample_count: 512,
        seed: 0,
    };
    c.bench_function("quasicalibration/grushin/512", |b| {
        b.iter(|| build_quasicalibration_with(&g, black_box(&[0.0, 0.0]), 0.05, &opts).unwrap())
    });
}

fn distance(c: &mut Criterion) {
    let s = builtin("heisenberg").unwrap();
    let opts = UpperOptions {
        restarts: 2,
        ..UpperOptions::default()
    };
    let mut g = c.benchmark_group("distance");
    g.sample_size(10);
    g.bench_function("upper/heisenberg", |b| {
        b.iter(|| distance_upper(&s, black_box(&[0.0; 3]), &[0.5, 0.0, 0.1], &opts).unwrap())
    });
    g.finish();
}

criterion_group!(benches, extremal, calibration, certificate, distance);
criterion_main!(benches);
