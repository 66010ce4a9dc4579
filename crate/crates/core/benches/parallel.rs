//! Parallel versus sequential execution of the hot paths.
//!
//! With the `parallel` feature each benchmark runs twice: inside a one-thread
//! rayon pool (the sequential schedule) and on the default pool. Without the
//! feature only the sequential build is measured; compare the two builds with
//! `cargo bench -p relief-core` and
//! `cargo bench -p relief-core --no-default-features`.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::Rng;

use relief_core::inference::{shade, ShadeOptions};
use relief_core::metrics::{ssim, SsimParams};
use relief_core::raster_io::GrayImage;
use relief_core::rng::seeded;
use relief_core::tensor::{conv2d_forward, ConvParams, Tensor4};
use relief_core::terrain::{synth_terrain, SynthSpec};
use relief_core::unet::{UNetConfig, UNetModel};

#[cfg(feature = "parallel")]
fn schedules() -> Vec<(&'static str, rayon::ThreadPool)> {
    let one = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap();
    let all = rayon::ThreadPoolBuilder::new().build().unwrap();
    vec![("sequential", one), ("parallel", all)]
}

#[cfg(feature = "parallel")]
fn run_each(c: &mut Criterion, group: &str, f: impl Fn() + Send + Sync) {
    let mut g = c.benchmark_group(group);
    for (name, pool) in schedules() {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| pool.install(&f))
        });
    }
    g.finish();
}

#[cfg(not(feature = "parallel"))]
fn run_each(c: &mut Criterion, group: &str, f: impl Fn() + Send + Sync) {
    let mut g = c.benchmark_group(group);
    g.bench_function(BenchmarkId::from_parameter("sequential-build"), |b| {
        b.iter(&f)
    });
    g.finish();
}

fn conv(c: &mut Criterion) {
    let mut rng = seeded(1);
    let x = Tensor4::from_fn([8, 16, 64, 64], |_| rng.random::<f32>());
    let p = ConvParams {
        out_channels: 16,
        in_channels: 16,
        weight: (0..16 * 16 * 9)
            .map(|_| rng.random_range(-0.1f32..0.1))
            .collect(),
        bias: vec![0.0; 16],
    };
    run_each(c, "conv2d_8x16x64x64", || {
        std::hint::black_box(conv2d_forward(&x, &p).unwrap());
    });
}

fn tiled_shade(c: &mut Criterion) {
    let config = UNetConfig {
        levels: 2,
        base_channels: 8,
        dropout_rates: vec![0.1, 0.2],
        tile_size: 64,
        crop_border: 8,
    };
    let model = UNetModel::build(config, &mut seeded(2)).unwrap();
    let dem = synth_terrain(3, 256, 256, &SynthSpec::default()).unwrap();
    run_each(c, "shade_256x256", || {
        std::hint::black_box(shade(&model, &dem, &ShadeOptions::default()).unwrap());
    });
}

fn ssim_metric(c: &mut Criterion) {
    let mut rng = seeded(4);
    let mut img =
        || GrayImage::new(256, 256, (0..256 * 256).map(|_| rng.random()).collect()).unwrap();
    let (a, b) = (img(), img());
    run_each(c, "ssim_256x256", || {
        std::hint::black_box(ssim(&a, &b, SsimParams::default()).unwrap());
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = conv, tiled_shade, ssim_metric
}
criterion_main!(benches);
