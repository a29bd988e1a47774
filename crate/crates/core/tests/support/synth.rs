//! Synthetic two-class fundus-like corpus.
//!
//! Both classes are a bright disc on a dark surround. Class 0 is a smooth
//! orange-red disc; class 1 is greener and carries a high-frequency stripe
//! texture at a random orientation. Brightness, hue and disc placement are
//! jittered per image.

use std::path::Path;

use rand::Rng;

use fundus::dataset::{Sample, CLASS_NAMES};
use fundus::imgproc::Image;
use fundus::rng;

pub fn fundus_like(label: usize, size: usize, r: &mut impl Rng) -> Image {
    let base: [f32; 3] = if label == 0 { [40.0, 90.0, 200.0] } else { [70.0, 130.0, 150.0] };
    let gain = r.random_range(0.85f32..1.15);
    let tint: [f32; 3] = std::array::from_fn(|_| r.random_range(-15.0f32..15.0));
    let c = size as f32 / 2.0;
    let (cy, cx) = (c + r.random_range(-3.0f32..3.0), c + r.random_range(-3.0f32..3.0));
    let radius = size as f32 * r.random_range(0.40f32..0.47);
    let theta = r.random_range(0.0f32..std::f32::consts::PI);
    let freq = r.random_range(0.9f32..1.3);
    let phase = r.random_range(0.0f32..std::f32::consts::TAU);
    let (dy, dx) = (theta.sin(), theta.cos());
    let mut noise = rng::seeded(r.random());
    Image::from_fn(size, size, |y, x| {
        let (fy, fx) = (y as f32 - cy, x as f32 - cx);
        let d = (fy * fy + fx * fx).sqrt() / radius;
        let inside = (1.0 - d).clamp(0.0, 0.15) / 0.15;
        let shade = 1.0 - 0.35 * d.min(1.0);
        let stripe = if label == 1 { 35.0 * (freq * (fy * dy + fx * dx) + phase).sin() } else { 0.0 };
        std::array::from_fn(|k| {
            let v = (base[k] + tint[k]) * gain * shade + stripe + noise.random_range(-8.0f32..8.0);
            (8.0 + inside * v).clamp(0.0, 255.0) as u8
        })
    })
}

/// `per_class` images of each class, interleaved by label.
pub fn samples(per_class: usize, size: usize, seed: u64) -> Vec<Sample> {
    let mut r = rng::seeded(seed);
    (0..2 * per_class)
        .map(|i| {
            let label = i % 2;
            Sample {
                image: fundus_like(label, size, &mut r),
                label,
                source_path: format!("synthetic/{}/{i:04}.png", CLASS_NAMES[label]).into(),
            }
        })
        .collect()
}

/// Write `per_class` PNG images of each class under `root/<class>/`.
pub fn write_corpus(root: &Path, per_class: usize, size: usize, seed: u64) {
    for (i, s) in samples(per_class, size, seed).iter().enumerate() {
        let dir = root.join(CLASS_NAMES[s.label]);
        std::fs::create_dir_all(&dir).unwrap();
        s.image.save(&dir.join(format!("img{i:03}.png"))).unwrap();
    }
}
