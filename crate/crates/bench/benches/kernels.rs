use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use gilab_bench::Fixture;
use gilab_core::autodiff::grad;
use gilab_core::imaging::canny::square_image;
use gilab_core::imaging::{canny_edges, ssim, CannyParams};
use gilab_core::tea::{grad_matching_loss, Adam, MatchOptions};
use gilab_core::victim::VictimConfig;
use gilab_core::Tensor;

fn forward(c: &mut Criterion) {
    let f = Fixture::new(VictimConfig::default(), 1);
    let x = Tensor::constant(f.gray());
    c.bench_function("victim forward 1x16x16", |b| {
        b.iter(|| f.scenario.net.forward(black_box(&x)).unwrap())
    });
}

fn double_backward(c: &mut Criterion) {
    let f = Fixture::new(VictimConfig::default(), 1);
    c.bench_function("matching loss + image gradient", |b| {
        b.iter(|| {
            let x = Tensor::param(f.gray());
            let l = grad_matching_loss(
                &f.scenario.net,
                &x,
                &f.scenario.labels,
                &f.target,
                MatchOptions::default(),
            )
            .unwrap();
            grad(&l, &[x], false).unwrap()
        })
    });
}

fn imaging(c: &mut Criterion) {
    let img = square_image(32, 8, 8, 16, 0.8);
    let params = CannyParams::default();
    c.bench_function("canny 32x32", |b| {
        b.iter(|| canny_edges(black_box(&img), &params).unwrap())
    });
    let other = img.map(|v| v * 0.9 + 0.05);
    c.bench_function("ssim 32x32", |b| {
        b.iter(|| ssim(black_box(&img), black_box(&other)).unwrap())
    });
}

fn tea_iteration(c: &mut Criterion) {
    let f = Fixture::new(VictimConfig::default(), 1);
    let obj = f.objective();
    let mut x = f.gray();
    let mut adam = Adam::new(x.len());
    c.bench_function("attack iteration", |b| {
        b.iter(|| {
            let xt = Tensor::param(x.clone());
            let (o, _) = obj.evaluate(&xt).unwrap();
            let g = grad(&o, std::slice::from_ref(&xt), false).unwrap();
            adam.step(x.data_mut(), g[0].data(), f.config.lr);
            for v in x.data_mut() {
                *v = v.clamp(0.0, 1.0);
            }
        })
    });
}

criterion_group!(benches, forward, double_backward, imaging, tea_iteration);
criterion_main!(benches);
