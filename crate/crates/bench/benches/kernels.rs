use std::hint::black_box;

use avseg_core::evaluation::roc_auc;
use avseg_core::inference::{predict_full, skeletonize, InferenceConfig};
use avseg_core::io::{FundusImage, LabelTriMap, Raster};
use avseg_core::network::NetworkConfig;
use avseg_core::preprocess::{gabor_enhance, line_detect, preprocess, GaborBankParams, LineDetectorParams, PreprocessConfig};
use avseg_core::training::{train_step, LossWeights, TrainConfig, TrainImage, TrainState};
use avseg_core::{Tape, Tensor};
use criterion::{criterion_group, criterion_main, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_image(h: usize, w: usize, seed: u64) -> FundusImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rgb = (0..h * w).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
    FundusImage::new(h, w, rgb, None).unwrap()
}

fn random_label(h: usize, w: usize, seed: u64) -> LabelTriMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut l = LabelTriMap::empty(h, w);
    for i in 0..h * w {
        match rng.random_range(0..10) {
            0 => (l.vessel[i], l.artery[i]) = (true, true),
            1 => (l.vessel[i], l.vein[i]) = (true, true),
            _ => {}
        }
    }
    l
}

fn conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::from_fn(vec![4, 16, 64, 64], |_| rng.random_range(-1.0f32..1.0));
    let w = Tensor::from_fn(vec![16, 16, 3, 3], |_| rng.random_range(-0.1f32..0.1));
    c.bench_function("conv3x3_16ch_64px_fwd_bwd", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let wv = tape.param(w.clone());
            let y = tape.conv2d(xv, wv, None, 1, 1).unwrap();
            let s = tape.sum_squares(y);
            tape.backward(s).unwrap();
            black_box(tape.grad(wv).map(|g| g[0]))
        })
    });
}

fn filters(c: &mut Criterion) {
    let img = random_image(128, 128, 2);
    let g = img.channel(1);
    c.bench_function("gabor_bank_128px", |b| b.iter(|| gabor_enhance(black_box(&g), &GaborBankParams::default())));
    c.bench_function("line_detector_128px", |b| b.iter(|| line_detect(black_box(&g), &LineDetectorParams::default())));
}

fn training(c: &mut Criterion) {
    let net = NetworkConfig { base_width: 8, ..NetworkConfig::default() };
    let stack = preprocess(&random_image(128, 128, 3), &PreprocessConfig::default()).unwrap();
    let images = vec![TrainImage::new("a", stack, random_label(128, 128, 4), None).unwrap()];
    let cfg = TrainConfig { batch: 4, ..TrainConfig::default() };
    let weights = LossWeights::default();
    let mut state = TrainState::<f32>::new(&net, 0).unwrap();
    let mut group = c.benchmark_group("training");
    group.sample_size(10);
    group.bench_function("train_step_w8_batch4", |b| {
        b.iter(|| train_step(&images, &net, &cfg, &weights, &mut state).unwrap().loss)
    });
    group.finish();
}

fn inference(c: &mut Criterion) {
    let net = NetworkConfig { base_width: 8, ..NetworkConfig::default() };
    let stack = preprocess(&random_image(128, 128, 5), &PreprocessConfig::default()).unwrap();
    let state = TrainState::<f32>::new(&net, 0).unwrap();
    let mut group = c.benchmark_group("inference");
    group.sample_size(10);
    group.bench_function("predict_full_128px_stride10", |b| {
        b.iter(|| predict_full(&state.params, &net, &stack, &InferenceConfig::default()).unwrap().coverage[0])
    });
    group.finish();
}

fn evaluation(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let scores: Vec<f64> = (0..100_000).map(|_| rng.random()).collect();
    let labels: Vec<bool> = scores.iter().map(|&s| rng.random::<f64>() < s).collect();
    c.bench_function("roc_auc_100k", |b| b.iter(|| roc_auc(black_box(&scores), &labels).unwrap()));
    let mask = Raster::from_fn(128, 128, |y, x| ((x as f64 / 9.0).sin() + (y as f64 / 13.0).cos() > 0.9) as u8 as f64);
    let mask: Vec<bool> = mask.data.iter().map(|&v| v > 0.5).collect();
    c.bench_function("skeletonize_128px", |b| b.iter(|| skeletonize(black_box(&mask), 128, 128).unwrap()));
}

criterion_group!(benches, conv, filters, training, inference, evaluation);
criterion_main!(benches);
