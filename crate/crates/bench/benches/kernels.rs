use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use turbkit::metrics::ssim;
use turbkit::ops::{conv2d, gaussian_blur, warp_bilinear, Padding};
use turbkit::sim::{apply_degradation, d_over_r0_to_params, sample_degradation, TurbulenceParams};
use turbkit::Rng;
use turbkit_bench::image;

fn bench_conv(c: &mut Criterion) {
    let mut g = c.benchmark_group("conv2d_3x3");
    for ch in [8usize, 32] {
        let x = image(64, 64, ch);
        let k = Rng::new(2).normal_tensor(&[3, 3, ch, ch], 0.1);
        g.bench_with_input(BenchmarkId::from_parameter(ch), &ch, |b, _| {
            b.iter(|| conv2d(black_box(&x), &k, 1, Padding::Zero).unwrap())
        });
    }
    g.finish();
}

fn bench_blur_warp(c: &mut Criterion) {
    let x = image(128, 128, 3);
    c.bench_function("gaussian_blur_sigma2_128", |b| b.iter(|| gaussian_blur(black_box(&x), 2.0).unwrap()));
    let flow = Rng::new(3).normal_tensor(&[128, 128, 2], 1.5);
    c.bench_function("warp_bilinear_128", |b| b.iter(|| warp_bilinear(black_box(&x), &flow).unwrap()));
}

fn bench_degradation(c: &mut Criterion) {
    let x = image(128, 128, 3);
    let p = d_over_r0_to_params(3.0, &TurbulenceParams { noise_sigma: 0.01, ..Default::default() }).unwrap();
    c.bench_function("sample_degradation_128", |b| {
        b.iter(|| sample_degradation::<f32>(&p, 128, 128, &mut Rng::new(4)).unwrap())
    });
    let field = sample_degradation::<f32>(&p, 128, 128, &mut Rng::new(4)).unwrap();
    c.bench_function("apply_degradation_128", |b| {
        b.iter(|| apply_degradation(black_box(&x), &field, &mut Rng::new(5)).unwrap())
    });
}

fn bench_ssim(c: &mut Criterion) {
    let x = image(128, 128, 3);
    let y = Rng::new(6).uniform_tensor::<f32>(&[128, 128, 3], 0.0, 1.0);
    c.bench_function("ssim_128", |b| b.iter(|| ssim(black_box(&x), &y).unwrap()));
}

criterion_group!(benches, bench_conv, bench_blur_warp, bench_degradation, bench_ssim);
criterion_main!(benches);
