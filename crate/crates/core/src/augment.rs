//! Training-time augmentation and feature-wise normalization.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Sample;
use crate::error::{Error, Result};
use crate::imgproc::Image;
use crate::par;
use crate::rng;
use crate::tensor::Tensor;

/// Lower bound applied to fitted standard deviations.
pub const STD_FLOOR: f32 = 1e-6;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FillMode {
    /// Out-of-bounds coordinates take the nearest edge pixel.
    #[default]
    Nearest,
}

/// Random affine augmentation ranges.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Rotation drawn from `[-r, r]` degrees.
    pub rotation_range: f64,
    /// Zoom factor drawn from `[1 - z, 1 + z]`.
    pub zoom_range: f64,
    /// Horizontal shift as a fraction of the width.
    pub width_shift_range: f64,
    /// Vertical shift as a fraction of the height.
    pub height_shift_range: f64,
    /// Shear angle in radians drawn from `[-s, s]`.
    pub shear_range: f64,
    pub horizontal_flip: bool,
    pub fill_mode: FillMode,
    /// Divide by the fitted per-channel std after subtracting the mean.
    pub featurewise_std_normalization: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            rotation_range: 30.0,
            zoom_range: 0.15,
            width_shift_range: 0.2,
            height_shift_range: 0.2,
            shear_range: 0.15,
            horizontal_flip: true,
            fill_mode: FillMode::Nearest,
            featurewise_std_normalization: true,
        }
    }
}

impl AugmentConfig {
    /// No geometric augmentation; normalization unchanged.
    pub fn disabled() -> Self {
        AugmentConfig {
            rotation_range: 0.0,
            zoom_range: 0.0,
            width_shift_range: 0.0,
            height_shift_range: 0.0,
            shear_range: 0.0,
            horizontal_flip: false,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ranges = [
            ("rotation_range", self.rotation_range),
            ("zoom_range", self.zoom_range),
            ("width_shift_range", self.width_shift_range),
            ("height_shift_range", self.height_shift_range),
            ("shear_range", self.shear_range),
        ];
        for (name, v) in ranges {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::config(format!("augment.{name} must be a finite value >= 0, got {v}")));
            }
        }
        if self.zoom_range >= 1.0 {
            return Err(Error::config("augment.zoom_range must be below 1"));
        }
        Ok(())
    }
}

/// Per-channel mean and standard deviation of `[0, 1]`-scaled pixels, in
/// R, G, B order.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl NormStats {
    pub fn identity() -> Self {
        NormStats {
            mean: [0.0; 3],
            std: [1.0; 3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.std.iter().any(|&s| !(s > 0.0) || !s.is_finite()) || self.mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::config(format!("invalid normalization statistics {self:?}")));
        }
        Ok(())
    }
}

/// Fit mean and (population) standard deviation over every pixel of every
/// image, on the `[0, 1]` scale.
pub fn fit_stats<'a>(images: impl IntoIterator<Item = &'a Image>) -> Result<NormStats> {
    // Exact per-channel histograms make the moments order-independent.
    let mut hist = [[0u64; 256]; 3];
    for img in images {
        for px in img.data().chunks_exact(3) {
            // Stored B, G, R; statistics are R, G, B.
            hist[0][px[2] as usize] += 1;
            hist[1][px[1] as usize] += 1;
            hist[2][px[0] as usize] += 1;
        }
    }
    let total: u64 = hist[0].iter().sum();
    if total == 0 {
        return Err(Error::Data("cannot fit normalization statistics on an empty set".into()));
    }
    let mut stats = NormStats::identity();
    for c in 0..3 {
        let mean = hist[c]
            .iter()
            .enumerate()
            .map(|(v, &n)| v as f64 / 255.0 * n as f64)
            .sum::<f64>()
            / total as f64;
        let var = hist[c]
            .iter()
            .enumerate()
            .map(|(v, &n)| (v as f64 / 255.0 - mean).powi(2) * n as f64)
            .sum::<f64>()
            / total as f64;
        stats.mean[c] = mean as f32;
        stats.std[c] = (var.sqrt() as f32).max(STD_FLOOR);
    }
    Ok(stats)
}

/// `[H, W, 3]` tensor in R, G, B order scaled to `[0, 1]`.
pub fn to_tensor(img: &Image) -> Tensor {
    let mut data = Vec::with_capacity(img.data().len());
    for px in img.data().chunks_exact(3) {
        data.extend([px[2], px[1], px[0]].map(|v| v as f32 / 255.0));
    }
    Tensor::new([img.height(), img.width(), 3], data).expect("image dimensions are positive")
}

/// Per channel `(x - mean) / std` over a tensor whose last axis has 3 channels.
pub fn normalize(x: &Tensor, stats: &NormStats) -> Result<Tensor> {
    normalize_with(x, stats, true)
}

fn normalize_with(x: &Tensor, stats: &NormStats, divide_std: bool) -> Result<Tensor> {
    stats.validate()?;
    if x.shape().last() != Some(&3) {
        return Err(Error::dim(format!("normalize expects 3 channels, got {:?}", x.shape())));
    }
    let mut data = x.data().to_vec();
    for px in data.chunks_exact_mut(3) {
        for c in 0..3 {
            px[c] -= stats.mean[c];
            if divide_std {
                px[c] /= stats.std[c];
            }
        }
    }
    Tensor::new(x.shape().to_vec(), data)
}

/// Image to normalized network input.
pub fn prepare(img: &Image, stats: &NormStats, cfg: &AugmentConfig) -> Result<Tensor> {
    normalize_with(&to_tensor(img), stats, cfg.featurewise_std_normalization)
}

/// One concrete draw of the augmentation parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TransformParams {
    pub rotation_deg: f64,
    pub zoom: f64,
    /// Shift in pixels along rows and columns.
    pub shift_rows: f64,
    pub shift_cols: f64,
    pub shear: f64,
    pub flip: bool,
}

impl TransformParams {
    pub const IDENTITY: TransformParams = TransformParams {
        rotation_deg: 0.0,
        zoom: 1.0,
        shift_rows: 0.0,
        shift_cols: 0.0,
        shear: 0.0,
        flip: false,
    };

    pub fn sample(cfg: &AugmentConfig, height: usize, width: usize, rng: &mut impl Rng) -> Self {
        let mut sym = |r: f64| if r > 0.0 { rng.random_range(-r..=r) } else { 0.0 };
        let rotation_deg = sym(cfg.rotation_range);
        let zoom = 1.0 + sym(cfg.zoom_range);
        let shift_rows = sym(cfg.height_shift_range) * height as f64;
        let shift_cols = sym(cfg.width_shift_range) * width as f64;
        let shear = sym(cfg.shear_range);
        let flip = cfg.horizontal_flip && rng.random::<bool>();
        TransformParams {
            rotation_deg,
            zoom,
            shift_rows,
            shift_cols,
            shear,
            flip,
        }
    }

    /// 2x2 linear part mapping output offsets (row, col) from the center to
    /// input offsets: rotate, then shear, then zoom.
    fn linear(&self) -> [[f64; 2]; 2] {
        let t = self.rotation_deg.to_radians();
        let rot = [[t.cos(), -t.sin()], [t.sin(), t.cos()]];
        let shear = [[1.0, -self.shear.sin()], [0.0, self.shear.cos()]];
        let zoom = [[self.zoom, 0.0], [0.0, self.zoom]];
        matmul(zoom, matmul(shear, rot))
    }
}

fn matmul(a: [[f64; 2]; 2], b: [[f64; 2]; 2]) -> [[f64; 2]; 2] {
    let mut out = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            out[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j];
        }
    }
    out
}

/// Resample `img` under `params` with nearest-neighbour lookup; coordinates
/// outside the image clamp to the edge.
pub fn apply_transform(img: &Image, params: &TransformParams) -> Image {
    let (h, w) = (img.height(), img.width());
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let m = params.linear();
    Image::from_fn(h, w, |y, x| {
        let x = if params.flip { w - 1 - x } else { x };
        let (dy, dx) = (y as f64 - cy, x as f64 - cx);
        let sy = m[0][0] * dy + m[0][1] * dx + params.shift_rows + cy;
        let sx = m[1][0] * dy + m[1][1] * dx + params.shift_cols + cx;
        let sy = sy.round().clamp(0.0, (h - 1) as f64) as usize;
        let sx = sx.round().clamp(0.0, (w - 1) as f64) as usize;
        img.pixel(sy, sx)
    })
}

pub fn random_transform(img: &Image, cfg: &AugmentConfig, rng: &mut impl Rng) -> Image {
    let params = TransformParams::sample(cfg, img.height(), img.width(), rng);
    apply_transform(img, &params)
}

/// Batches per epoch, counting the final short batch.
pub fn steps_per_epoch(n: usize, batch_size: usize) -> usize {
    n.div_ceil(batch_size)
}

#[derive(Clone, Debug)]
pub struct Batch {
    /// `[B, H, W, 3]` normalized inputs.
    pub inputs: Tensor,
    pub labels: Vec<f32>,
    /// Positions of the batch members in the source slice.
    pub indices: Vec<usize>,
}

const STREAM_SHUFFLE: u64 = 0x5348;
const STREAM_SAMPLE: u64 = 0x4147;

/// One epoch of shuffled, augmented, normalized batches.
///
/// Shuffle order depends on `(seed, epoch)` and each sample's transform on
/// `(seed, epoch, sample index)`, so results do not depend on batch size
/// or thread count.
pub struct AugmentedStream<'a> {
    samples: &'a [Sample],
    cfg: &'a AugmentConfig,
    stats: &'a NormStats,
    batch_size: usize,
    order: Vec<usize>,
    pos: usize,
    seed: u64,
    epoch: u64,
    augment: bool,
}

impl<'a> AugmentedStream<'a> {
    pub fn new(
        samples: &'a [Sample],
        cfg: &'a AugmentConfig,
        stats: &'a NormStats,
        batch_size: usize,
        seed: u64,
        epoch: u64,
    ) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        cfg.validate()?;
        stats.validate()?;
        if let Some(first) = samples.first() {
            let dims = (first.image.height(), first.image.width());
            if let Some(bad) = samples.iter().find(|s| (s.image.height(), s.image.width()) != dims) {
                return Err(Error::dim(format!(
                    "{} is {}x{}, expected {}x{}",
                    bad.source_path.display(),
                    bad.image.height(),
                    bad.image.width(),
                    dims.0,
                    dims.1
                )));
            }
        }
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut rng::derive(seed, &[STREAM_SHUFFLE, epoch]));
        Ok(AugmentedStream {
            samples,
            cfg,
            stats,
            batch_size,
            order,
            pos: 0,
            seed,
            epoch,
            augment: true,
        })
    }

    /// Keep shuffling and normalization but skip geometric transforms.
    pub fn without_augmentation(mut self) -> Self {
        self.augment = false;
        self
    }

    pub fn steps(&self) -> usize {
        steps_per_epoch(self.samples.len(), self.batch_size)
    }
}

impl Iterator for AugmentedStream<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let indices = self.order[self.pos..end].to_vec();
        self.pos = end;

        let pieces = par::map_collect(indices.len(), |k| {
            let idx = indices[k];
            let img = &self.samples[idx].image;
            let img = if self.augment {
                let mut r = rng::derive(self.seed, &[STREAM_SAMPLE, self.epoch, idx as u64]);
                random_transform(img, self.cfg, &mut r)
            } else {
                img.clone()
            };
            prepare(&img, self.stats, self.cfg).expect("stats validated").into_data()
        });
        let first = &self.samples[indices[0]].image;
        let shape = [indices.len(), first.height(), first.width(), 3];
        let inputs = Tensor::new(shape, pieces.concat()).expect("uniform image sizes");
        let labels = indices.iter().map(|&i| self.samples[i].label as f32).collect();
        Some(Batch { inputs, labels, indices })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use std::path::PathBuf;

    fn marker(h: usize, w: usize) -> Image {
        Image::from_fn(h, w, |y, x| [(y * w + x) as u8, 0, 0])
    }

    #[test]
    fn default_ranges() {
        let cfg = AugmentConfig::default();
        assert_eq!(cfg.rotation_range, 30.0);
        assert_eq!(cfg.zoom_range, 0.15);
        assert_eq!((cfg.width_shift_range, cfg.height_shift_range), (0.2, 0.2));
        assert_eq!(cfg.shear_range, 0.15);
        assert!(cfg.horizontal_flip && cfg.featurewise_std_normalization);
        assert!(AugmentConfig { rotation_range: -1.0, ..cfg }.validate().is_err());
    }

    #[test]
    fn disabled_config_is_identity() {
        let img = marker(5, 7);
        let mut rng = seeded(3);
        for _ in 0..10 {
            assert_eq!(random_transform(&img, &AugmentConfig::disabled(), &mut rng), img);
        }
    }

    #[test]
    fn flip_only_swaps_columns_about_half_the_time() {
        let img = Image::from_fn(1, 2, |_, x| [x as u8 * 100, 0, 0]);
        let cfg = AugmentConfig {
            horizontal_flip: true,
            ..AugmentConfig::disabled()
        };
        let flipped = Image::from_fn(1, 2, |_, x| [(1 - x) as u8 * 100, 0, 0]);
        let mut n_flipped = 0;
        for seed in 0..400 {
            let out = random_transform(&img, &cfg, &mut seeded(seed));
            if out == flipped {
                n_flipped += 1;
            } else {
                assert_eq!(out, img);
            }
        }
        assert!((150..=250).contains(&n_flipped), "{n_flipped}");
    }

    #[test]
    fn quarter_turn_permutes_indices() {
        let img = marker(3, 3);
        let params = TransformParams {
            rotation_deg: 90.0,
            ..TransformParams::IDENTITY
        };
        let out = apply_transform(&img, &params);
        // Hand-rotated grid: values 0..9 laid out row-major, turned a
        // quarter clockwise.
        let expected = [[6, 3, 0], [7, 4, 1], [8, 5, 2]];
        for y in 0..3 {
            for x in 0..3 {
                assert_eq!(out.pixel(y, x)[0], expected[y][x]);
            }
        }
    }

    #[test]
    fn transforms_only_reuse_input_values() {
        let img = marker(9, 11);
        let cfg = AugmentConfig::default();
        let mut rng = seeded(21);
        for _ in 0..20 {
            let out = random_transform(&img, &cfg, &mut rng);
            assert_eq!((out.height(), out.width()), (9, 11));
            assert!(out.data().chunks(3).all(|p| (p[0] as usize) < 99 && p[1] == 0 && p[2] == 0));
        }
    }

    #[test]
    fn two_point_statistics() {
        let a = Image::filled(2, 2, [51, 102, 204]);
        let b = Image::filled(2, 2, [153, 0, 0]);
        let stats = fit_stats([&a, &b]).unwrap();
        // R, G, B order: r values 204 and 0, g 102 and 0, b 51 and 153.
        let expect = |x: f64, y: f64| ((x + y) / 2.0 / 255.0, (x - y).abs() / 2.0 / 255.0);
        for (c, (x, y)) in [(204.0, 0.0), (102.0, 0.0), (51.0, 153.0)].into_iter().enumerate() {
            let (m, s) = expect(x, y);
            assert!((stats.mean[c] as f64 - m).abs() < 1e-6);
            assert!((stats.std[c] as f64 - s).abs() < 1e-6);
        }
    }

    #[test]
    fn black_images_floor_the_std() {
        let stats = fit_stats([&Image::filled(3, 3, [0; 3])]).unwrap();
        assert_eq!(stats.mean, [0.0; 3]);
        assert_eq!(stats.std, [STD_FLOOR; 3]);
        assert!(fit_stats(std::iter::empty()).is_err());
    }

    #[test]
    fn normalize_reference_points() {
        let stats = NormStats {
            mean: [0.128_039_58, 0.178_984_5, 0.238_663_35],
            std: [0.143_048_26, 0.181_325_21, 0.236_193_36],
        };
        let at_mean = Tensor::from_fn([2, 2, 3], |i| stats.mean[i % 3]);
        assert!(normalize(&at_mean, &stats).unwrap().data().iter().all(|&v| v == 0.0));
        let one_std = Tensor::from_fn([2, 2, 3], |i| stats.mean[i % 3] + stats.std[i % 3]);
        let out = normalize(&one_std, &stats).unwrap();
        assert!(out.data().iter().all(|&v| (v - 1.0).abs() < 1e-6));
    }

    fn samples(n: usize) -> Vec<Sample> {
        (0..n)
            .map(|i| Sample {
                image: Image::filled(4, 4, [i as u8; 3]),
                label: i % 2,
                source_path: PathBuf::from(i.to_string()),
            })
            .collect()
    }

    #[test]
    fn stream_covers_each_sample_once() {
        let data = samples(1400);
        let cfg = AugmentConfig::default();
        let stats = NormStats::identity();
        let stream = AugmentedStream::new(&data, &cfg, &stats, 32, 1, 0).unwrap();
        assert_eq!(stream.steps(), 44);
        let batches: Vec<Batch> = stream.collect();
        assert_eq!(batches.len(), 44);
        assert_eq!(batches.last().unwrap().indices.len(), 1400 - 43 * 32);
        let mut seen: Vec<usize> = batches.iter().flat_map(|b| b.indices.clone()).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..1400).collect::<Vec<_>>());
    }

    #[test]
    fn oversized_batch_yields_everything_once() {
        let data = samples(5);
        let cfg = AugmentConfig::default();
        let stats = NormStats::identity();
        let batches: Vec<Batch> = AugmentedStream::new(&data, &cfg, &stats, 10, 1, 0).unwrap().collect();
        assert_eq!(batches.len(), 1);
        assert_eq!(batches[0].inputs.shape(), &[5, 4, 4, 3]);
    }

    #[test]
    fn stream_replays_bit_identically() {
        let data: Vec<Sample> = (0..10)
            .map(|i| Sample {
                image: marker(6, 6),
                label: i % 2,
                source_path: PathBuf::new(),
            })
            .collect();
        let cfg = AugmentConfig::default();
        let stats = NormStats::identity();
        let run = || -> Vec<Vec<f32>> {
            AugmentedStream::new(&data, &cfg, &stats, 3, 77, 2)
                .unwrap()
                .map(|b| b.inputs.into_data())
                .collect()
        };
        assert_eq!(run(), run());
    }
}
