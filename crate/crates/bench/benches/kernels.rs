//! Criterion benchmarks for the hot kernels and composed passes.

use criterion::{criterion_group, criterion_main, Criterion};
use mfpnet_bench::tiny_model_and_input;
use mfpnet_core::blocks::Brm;
use mfpnet_core::loss::cross_entropy;
use mfpnet_core::ops;
use mfpnet_core::params::{Forward, NetBuilder};
use mfpnet_core::rng::Rng;
use mfpnet_core::sgcn::SgcnPropagator;
use mfpnet_core::tensor::{ConvSpec, Tensor};
use std::hint::black_box;

fn bench_conv2d(c: &mut Criterion) {
    let mut rng = Rng::new(1);
    let x = Tensor::random([1, 16, 32, 32], -1.0, 1.0, &mut rng);
    let w = Tensor::random([16, 16, 3, 3], -0.5, 0.5, &mut rng);
    let spec = ConvSpec::same(3, 16, 16).without_bias();
    c.bench_function("conv2d_16x32x32_3x3", |b| {
        b.iter(|| ops::conv2d(black_box(&x), black_box(&w), None, &spec).unwrap())
    });
    let out = ops::conv2d(&x, &w, None, &spec).unwrap();
    c.bench_function("conv2d_backward_16x32x32_3x3", |b| {
        b.iter(|| ops::conv2d_backward(black_box(&out), black_box(&x), black_box(&w), &spec).unwrap())
    });
}

fn bench_brm(c: &mut Criterion) {
    let mut b = NetBuilder::new(2);
    let brm = Brm::new(&mut b, "brm", 16, 2).unwrap();
    let mut rng = Rng::new(3);
    let x = Tensor::random([1, 16, 16, 16], -1.0, 1.0, &mut rng);
    c.bench_function("brm_forward_16x16x16", |bench| {
        bench.iter(|| {
            let mut f = Forward::eval(&b.params, &b.states);
            let xn = f.tape.leaf(x.clone(), false);
            black_box(brm.forward(&mut f, xn).unwrap());
        })
    });
}

fn bench_sgcn(c: &mut Criterion) {
    let mut b = NetBuilder::new(4);
    let sgcn = SgcnPropagator::new(&mut b, "sgcn", 16, 8, 1, 2).unwrap();
    let mut rng = Rng::new(5);
    let x = Tensor::random([1, 16, 16, 16], -1.0, 1.0, &mut rng);
    c.bench_function("sgcn_propagate_16x16x16", |bench| {
        bench.iter(|| {
            let mut f = Forward::eval(&b.params, &b.states);
            let xn = f.tape.leaf(x.clone(), false);
            black_box(sgcn.forward(&mut f, xn).unwrap());
        })
    });
}

fn bench_model(c: &mut Criterion) {
    let (model, input) = tiny_model_and_input(1);
    c.bench_function("tiny_model_forward_eval", |b| {
        b.iter(|| black_box(model.forward_eval(&input).unwrap()))
    });

    let (mut train_model, batch) = tiny_model_and_input(2);
    let labels = vec![0u8; 2 * 32 * 32];
    c.bench_function("tiny_model_train_step", |b| {
        b.iter(|| {
            let step = train_model.forward_train(&batch).unwrap();
            let (_, dlogits) = cross_entropy(step.logits(), &labels).unwrap();
            black_box(step.backward(&dlogits).unwrap());
        })
    });
}

criterion_group!(benches, bench_conv2d, bench_brm, bench_sgcn, bench_model);
criterion_main!(benches);
