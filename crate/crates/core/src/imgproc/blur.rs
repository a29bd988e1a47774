use super::Image;
use crate::error::{Error, Result};
use crate::par;

/// Kernel radius derived from sigma: `ceil(3 * sigma)`.
pub fn kernel_radius(sigma: f64) -> usize {
    (3.0 * sigma).ceil() as usize
}

/// Normalized 1-D Gaussian taps of width `2 * radius + 1`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = kernel_radius(sigma) as isize;
    let taps: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / sum).collect()
}

/// Mirror an out-of-range index without repeating the edge sample
/// (`gfedcb|abcdefgh|gfedcba`).
pub fn reflect_101(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

/// Separable Gaussian blur with reflected borders.
pub fn gaussian_blur(img: &Image, sigma: f64) -> Result<Image> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::config(format!("blur sigma must be positive, got {sigma}")));
    }
    let kernel = gaussian_kernel(sigma);
    let r = (kernel.len() / 2) as isize;
    let (h, w) = (img.height(), img.width());
    let src = img.data();

    let mut horizontal = vec![0.0f64; h * w * 3];
    par::for_each_chunk_mut(&mut horizontal, w * 3, |y, row| {
        for x in 0..w {
            let mut acc = [0.0f64; 3];
            for (k, &t) in kernel.iter().enumerate() {
                let sx = reflect_101(x as isize + k as isize - r, w);
                let i = (y * w + sx) * 3;
                for c in 0..3 {
                    acc[c] += t * src[i + c] as f64;
                }
            }
            row[x * 3..x * 3 + 3].copy_from_slice(&acc);
        }
    });

    let mut out = vec![0u8; h * w * 3];
    par::for_each_chunk_mut(&mut out, w * 3, |y, row| {
        for (j, o) in row.iter_mut().enumerate() {
            let mut acc = 0.0f64;
            for (k, &t) in kernel.iter().enumerate() {
                let sy = reflect_101(y as isize + k as isize - r, h);
                acc += t * horizontal[sy * w * 3 + j];
            }
            *o = acc.round().clamp(0.0, 255.0) as u8;
        }
    });
    Image::new(h, w, out)
}

/// Per pixel `saturate(round(alpha * a + beta * b + gamma))`, computed in
/// `f64` so no intermediate overflows.
pub fn weighted_add(a: &Image, alpha: f64, b: &Image, beta: f64, gamma: f64) -> Result<Image> {
    if (a.height(), a.width()) != (b.height(), b.width()) {
        return Err(Error::dim(format!(
            "weighted_add operands differ: {}x{} vs {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (alpha * x as f64 + beta * y as f64 + gamma).round().clamp(0.0, 255.0) as u8)
        .collect();
    Image::new(a.height(), a.width(), data)
}

/// Local-contrast enhancement: `4 * img - 4 * blur(img, sigma) + 128`.
pub fn blur_enhance(img: &Image, sigma: f64) -> Result<Image> {
    let blurred = gaussian_blur(img, sigma)?;
    weighted_add(img, 4.0, &blurred, -4.0, 128.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use rand::Rng;

    fn random_image(h: usize, w: usize, seed: u64) -> Image {
        let mut rng = seeded(seed);
        Image::from_fn(h, w, |_, _| [rng.random(), rng.random(), rng.random()])
    }

    #[test]
    fn reflection_indices() {
        let got: Vec<usize> = (-3..8).map(|i| reflect_101(i, 5)).collect();
        assert_eq!(got, [3, 2, 1, 0, 1, 2, 3, 4, 3, 2, 1]);
        assert_eq!(reflect_101(-7, 1), 0);
        // Radius far beyond the image still lands inside.
        assert!(reflect_101(-40, 3) < 3 && reflect_101(97, 3) < 3);
    }

    #[test]
    fn kernel_is_normalized_with_three_sigma_radius() {
        let k = gaussian_kernel(400.0 / 30.0);
        assert_eq!(k.len(), 2 * 40 + 1);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_image_is_unchanged() {
        for sigma in [0.5, 2.0, 400.0 / 30.0] {
            let img = Image::filled(20, 17, [3, 128, 250]);
            assert_eq!(gaussian_blur(&img, sigma).unwrap(), img);
        }
    }

    #[test]
    fn large_sigma_smooths_heavily() {
        let img = random_image(40, 40, 1);
        let out = gaussian_blur(&img, 400.0 / 30.0).unwrap();
        let spread = |im: &Image| {
            let g: Vec<u8> = im.data().iter().skip(1).step_by(3).copied().collect();
            g.iter().max().unwrap() - g.iter().min().unwrap()
        };
        assert!(spread(&out) < spread(&img) / 4, "{} vs {}", spread(&out), spread(&img));
    }

    #[test]
    fn bright_pixel_matches_dense_gaussian_sum() {
        let mut img = Image::filled(11, 11, [0; 3]);
        img.set_pixel(5, 4, [255, 200, 100]);
        let sigma = 1.2f64;
        let out = gaussian_blur(&img, sigma).unwrap();
        // Dense 2-D evaluation with its own normalization.
        let r = (3.0 * sigma).ceil() as isize;
        let mut weights = Vec::new();
        for dy in -r..=r {
            for dx in -r..=r {
                weights.push(((dy, dx), (-((dy * dy + dx * dx) as f64) / (2.0 * sigma * sigma)).exp()));
            }
        }
        let total: f64 = weights.iter().map(|w| w.1).sum();
        for y in 0..11 {
            for x in 0..11 {
                for c in 0..3 {
                    let mut s = 0.0;
                    for &((dy, dx), wgt) in &weights {
                        let sy = reflect_101(y as isize + dy, 11);
                        let sx = reflect_101(x as isize + dx, 11);
                        s += wgt / total * img.pixel(sy, sx)[c] as f64;
                    }
                    let got = out.pixel(y, x)[c] as f64;
                    assert!((got - s).abs() <= 1.0, "({y},{x},{c}): {got} vs {s}");
                }
            }
        }
    }

    #[test]
    fn nonpositive_sigma_is_rejected() {
        let img = Image::filled(2, 2, [0; 3]);
        assert!(gaussian_blur(&img, 0.0).is_err());
        assert!(gaussian_blur(&img, -1.0).is_err());
    }

    #[test]
    fn weighted_add_cases() {
        let a = random_image(8, 9, 2);
        let out = weighted_add(&a, 4.0, &a, -4.0, 128.0).unwrap();
        assert!(out.data().iter().all(|&v| v == 128));
        assert_eq!(weighted_add(&a, 1.0, &a, 0.0, 0.0).unwrap(), a);

        let b = random_image(8, 9, 3);
        let out = weighted_add(&a, 4.0, &b, -4.0, 128.0).unwrap();
        for ((&x, &y), &o) in a.data().iter().zip(b.data()).zip(out.data()) {
            let v = 4 * x as i32 - 4 * y as i32 + 128;
            assert_eq!(o as i32, v.clamp(0, 255));
        }
        assert!(weighted_add(&a, 1.0, &Image::filled(8, 8, [0; 3]), 1.0, 0.0).is_err());
    }
}
