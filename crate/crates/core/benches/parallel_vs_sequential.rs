//! Rayon fan-out against the forced sequential path on the hot loops:
//! face synthesis, crop/resize, and a training-mode forward/backward pass.
//! On a single-core host both columns should match to within noise.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use pfld::data::{input_tensor, SynthConfig};
use pfld::network::Mode;
use pfld::training::{prepare, ModelSpec};
use pfld::{par, Scheme};

fn strategies() -> [(&'static str, bool); 2] {
    [("parallel", true), ("sequential", false)]
}

fn run<R>(parallel: bool, f: impl FnOnce() -> R) -> R {
    if parallel {
        f()
    } else {
        par::sequential(f)
    }
}

fn synth(c: &mut Criterion) {
    let cfg = SynthConfig {
        count: 32,
        ..SynthConfig::default()
    };
    let mut g = c.benchmark_group("synth_32");
    for (name, p) in strategies() {
        g.bench_function(name, |b| {
            b.iter(|| run(p, || black_box(cfg.generate().unwrap())))
        });
    }
    g.finish();
}

fn crop(c: &mut Criterion) {
    let d = SynthConfig {
        count: 64,
        ..SynthConfig::default()
    }
    .generate()
    .unwrap();
    let mut g = c.benchmark_group("crop_64_to_112");
    for (name, p) in strategies() {
        g.bench_function(name, |b| {
            b.iter(|| run(p, || black_box(prepare(&d.samples, 112, 0.0).unwrap())))
        });
    }
    g.finish();
}

fn train_pass(c: &mut Criterion) {
    let spec = ModelSpec {
        width: 0.25,
        scheme: Scheme::Face68,
        reduced: false,
    };
    let model = spec.build().unwrap();
    let params = model.init(0).unwrap();
    let d = SynthConfig {
        count: 8,
        ..SynthConfig::default()
    }
    .generate()
    .unwrap();
    let s = prepare(&d.samples, model.input_size(), 0.0).unwrap();
    let images: Vec<_> = s.iter().map(|s| &s.image).collect();
    let x = input_tensor(&images).unwrap();
    let mut g = c.benchmark_group("forward_backward_b8_w025");
    g.sample_size(10);
    for (name, p) in strategies() {
        g.bench_function(name, |b| {
            b.iter(|| {
                run(p, || {
                    let f = model
                        .forward(&params, x.clone(), Mode::Train, true)
                        .unwrap();
                    let d_l = f.landmarks.clone();
                    let d_a = f.angles.clone();
                    black_box(model.backward(&params, f.tape, d_l, d_a).unwrap())
                })
            })
        });
    }
    g.finish();
}

criterion_group!(benches, synth, crop, train_pass);
criterion_main!(benches);
