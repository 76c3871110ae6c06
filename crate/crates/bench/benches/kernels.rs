use criterion::{criterion_group, criterion_main, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

use dsa_core::decoder::DecoderModel;
use dsa_core::mask::Mask;
use dsa_core::nms::{nms, soft_nms, NmsConfig};
use dsa_core::recon::{bilinear_sample, single_reconstruction, ReconConfig};
use dsa_core::{BoundingBox, Detection, Image};

fn random_image(rng: &mut impl Rng, h: usize, w: usize) -> Image {
    Image::from_raw(h, w, (0..h * w * 3).map(|_| rng.random()).collect()).unwrap()
}

fn random_dets(rng: &mut impl Rng, n: usize) -> Vec<Detection> {
    (0..n)
        .map(|_| {
            let (x, y) = (rng.random_range(0.0..170.0), rng.random_range(0.0..170.0));
            let (w, h) = (rng.random_range(10.0..30.0), rng.random_range(10.0..30.0));
            let b = BoundingBox::new(x, y, x + w, y + h).unwrap();
            Detection::new(rng.random(), b, rng.random(), rng.random_range(1..=10)).unwrap()
        })
        .collect()
}

fn bilinear(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let src = random_image(&mut rng, 50, 50);
    let pts: Vec<(f64, f64)> = (0..2500).map(|_| (rng.random_range(-1.0..51.0), rng.random_range(-1.0..51.0))).collect();
    c.bench_function("bilinear_sample 2500 points", |b| {
        b.iter(|| {
            let mut acc = 0.0;
            for &(x, y) in &pts {
                acc += bilinear_sample(&src, x, y)[0];
            }
            black_box(acc)
        })
    });
}

fn suppression(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let dets = random_dets(&mut rng, 300);
    c.bench_function("nms 300 boxes", |b| b.iter(|| nms(black_box(&dets), 0.5)));
    let cfg = NmsConfig::default();
    c.bench_function("soft-nms 300 boxes", |b| b.iter(|| soft_nms(black_box(&dets), &cfg)));
}

fn decoder(c: &mut Criterion) {
    let model = DecoderModel::new_random(1, 10, 50, 300, 3);
    let z = vec![0.3; 10];
    c.bench_function("decoder forward 50x50", |b| b.iter(|| model.forward(black_box(&z)).unwrap()));
}

fn reconstruction(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let model = DecoderModel::new_random(1, 10, 50, 300, 5);
    let target = random_image(&mut rng, 40, 40);
    let visible = Mask::full(40, 40);
    let det = Detection::new(0.9, BoundingBox::new(0.0, 0.0, 40.0, 40.0).unwrap(), 0.5, 1).unwrap();
    let cfg = ReconConfig { n_iter: 100, ..ReconConfig::default() };
    let mut g = c.benchmark_group("reconstruction");
    g.sample_size(10);
    g.bench_function("single 40x40, 100 steps", |b| {
        b.iter(|| single_reconstruction(&target, &visible, &det, &model, &cfg, 0).unwrap())
    });
    g.finish();
}

criterion_group!(benches, bilinear, suppression, decoder, reconstruction);
criterion_main!(benches);
