use criterion::{criterion_group, criterion_main, Criterion};
use spcnn_core::data::{gen_synthetic, prepare_tuples, SyntheticConfig};
use spcnn_core::edge::{canny, CannyParams};
use spcnn_core::network::{architecture, forward, he_uniform};
use spcnn_core::ops::conv2d_same;
use spcnn_core::shape_prior::{generate_shape_set, prior_term, prior_term_dense};
use spcnn_core::train::{loss_and_grad, TrainConfig};
use spcnn_core::Tensor;
use std::hint::black_box;

fn ramp(shape: [usize; 4]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|k| ((k * 37 % 101) as f64 / 101.0) - 0.5).collect()).unwrap()
}

fn conv(c: &mut Criterion) {
    let x = ramp([8, 64, 40, 40]);
    let k = ramp([64, 64, 3, 3]);
    let bias = vec![0.0; 64];
    c.bench_function("conv2d_same 8x64x40x40 k3", |b| b.iter(|| conv2d_same(black_box(&x), &k, &bias).unwrap()));
}

fn prior(c: &mut Criterion) {
    let cfg = TrainConfig::default();
    let img = &gen_synthetic(3, 1, &SyntheticConfig::new(128, 15))[0];
    let edges = canny(&img.image, &CannyParams::default()).unwrap().to_tensor();
    let yhat = ramp([1, 1, 128, 128]).map(|v| v + 0.5);
    let shapes = generate_shape_set(0, cfg.shapes.count, cfg.shapes.size).unwrap();
    let mut g = c.benchmark_group("prior_term 128x128 n=64");
    g.sample_size(10);
    g.bench_function("sparse", |b| {
        b.iter(|| prior_term(black_box(&yhat), &edges, &shapes, cfg.pool_window, cfg.prior_threshold).unwrap())
    });
    g.bench_function("dense", |b| {
        b.iter(|| prior_term_dense(black_box(&yhat), &edges, &shapes, cfg.pool_window, cfg.prior_threshold).unwrap())
    });
    g.finish();
}

fn network(c: &mut Criterion) {
    let params = he_uniform(&architecture(6, 64, 5, 3), 0).unwrap();
    let x = ramp([1, 1, 128, 128]);
    let mut g = c.benchmark_group("network");
    g.sample_size(10);
    g.bench_function("forward 128x128 width 64", |b| b.iter(|| forward(&params, black_box(&x)).unwrap()));
    let cfg = TrainConfig::default();
    let imgs = gen_synthetic(1, 2, &SyntheticConfig::new(128, 15));
    let tuples = prepare_tuples(&imgs, &cfg.canny, cfg.patch, cfg.stride).unwrap();
    let batch: Vec<_> = tuples.iter().take(cfg.batch_size).collect();
    let shapes = generate_shape_set(0, cfg.shapes.count, cfg.shapes.size).unwrap();
    let params = he_uniform(&cfg.network.layer_specs(), 0).unwrap();
    g.bench_function("loss_and_grad batch 32 width 64", |b| {
        b.iter(|| loss_and_grad(&params, black_box(&batch), &shapes, &cfg).unwrap())
    });
    g.finish();
}

criterion_group!(benches, conv, prior, network);
criterion_main!(benches);
