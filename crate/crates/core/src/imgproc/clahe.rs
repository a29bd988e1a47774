//! Contrast-limited adaptive histogram equalization.
//!
//! The image is split into a grid of tiles. Each tile gets a 256-bin
//! histogram whose bins are clipped at a limit; the clipped excess is spread
//! evenly over all bins (remainder one count at a time, strided), and the
//! clipped CDF becomes that tile's lookup table. Every output pixel blends
//! the tables of the four nearest tile centers bilinearly. Images whose size
//! is not a multiple of the grid are extended with reflected borders for the
//! histogram pass.

use super::{blur::reflect_101, luminance_plane, with_luminance, Image};
use crate::error::{Error, Result};

pub const DEFAULT_CLIP_LIMIT: f64 = 40.0;
pub const DEFAULT_GRID: (usize, usize) = (8, 8);

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClaheParams {
    pub clip_limit: f64,
    /// Tiles along x (columns) and y (rows).
    pub grid: (usize, usize),
}

impl Default for ClaheParams {
    fn default() -> Self {
        ClaheParams {
            clip_limit: DEFAULT_CLIP_LIMIT,
            grid: DEFAULT_GRID,
        }
    }
}

/// Per-tile bin limit: `max(1, floor(clip_limit * tile_pixels / 256))`.
pub fn clip_limit_for(clip_limit: f64, tile_pixels: usize) -> u32 {
    ((clip_limit * tile_pixels as f64 / 256.0) as u32).max(1)
}

/// Clip every bin at `limit` and redistribute the excess.
pub fn clip_histogram(hist: &mut [u32; 256], limit: u32) {
    let mut clipped = 0u32;
    for h in hist.iter_mut() {
        if *h > limit {
            clipped += *h - limit;
            *h = limit;
        }
    }
    let batch = clipped / 256;
    let mut residual = clipped - batch * 256;
    for h in hist.iter_mut() {
        *h += batch;
    }
    if residual > 0 {
        let step = (256 / residual as usize).max(1);
        let mut i = 0;
        while i < 256 && residual > 0 {
            hist[i] += 1;
            residual -= 1;
            i += step;
        }
    }
}

/// CLAHE on a single 8-bit plane of `height x width`.
pub fn clahe_plane(plane: &[u8], height: usize, width: usize, params: ClaheParams) -> Result<Vec<u8>> {
    let (tiles_x, tiles_y) = params.grid;
    if tiles_x == 0 || tiles_y == 0 {
        return Err(Error::config(format!("CLAHE grid {:?} must be at least 1x1", params.grid)));
    }
    if !(params.clip_limit > 0.0) {
        return Err(Error::config(format!("CLAHE clip limit must be positive, got {}", params.clip_limit)));
    }
    if height < tiles_y || width < tiles_x {
        return Err(Error::dim(format!(
            "image {height}x{width} is smaller than the {tiles_x}x{tiles_y} tile grid"
        )));
    }
    assert_eq!(plane.len(), height * width, "plane size");

    let tile_h = height.div_ceil(tiles_y);
    let tile_w = width.div_ceil(tiles_x);
    let tile_pixels = tile_h * tile_w;
    let limit = clip_limit_for(params.clip_limit, tile_pixels);
    // f32 throughout, as OpenCV computes it; f64 rounds differently when
    // the tile size is not a power of two.
    let lut_scale = 255.0f32 / tile_pixels as f32;

    let mut luts = vec![[0u8; 256]; tiles_x * tiles_y];
    for ty in 0..tiles_y {
        for tx in 0..tiles_x {
            let mut hist = [0u32; 256];
            for y in ty * tile_h..(ty + 1) * tile_h {
                let sy = reflect_101(y as isize, height);
                for x in tx * tile_w..(tx + 1) * tile_w {
                    let sx = reflect_101(x as isize, width);
                    hist[plane[sy * width + sx] as usize] += 1;
                }
            }
            clip_histogram(&mut hist, limit);
            let lut = &mut luts[ty * tiles_x + tx];
            let mut sum = 0u32;
            for (v, &h) in lut.iter_mut().zip(&hist) {
                sum += h;
                *v = (sum as f32 * lut_scale).round_ties_even().clamp(0.0, 255.0) as u8;
            }
        }
    }

    // Neighbouring tile indices and blend weight along one axis.
    let axis = |pos: usize, tile: usize, tiles: usize| {
        let t = pos as f32 * (1.0 / tile as f32) - 0.5;
        let t1 = t.floor();
        let frac = t - t1;
        let lo = (t1 as isize).max(0) as usize;
        let hi = ((t1 as isize + 1) as usize).min(tiles - 1);
        (lo, hi, frac)
    };
    let cols: Vec<_> = (0..width).map(|x| axis(x, tile_w, tiles_x)).collect();

    let mut out = vec![0u8; plane.len()];
    for y in 0..height {
        let (ty1, ty2, ya) = axis(y, tile_h, tiles_y);
        for (x, &(tx1, tx2, xa)) in cols.iter().enumerate() {
            let v = plane[y * width + x] as usize;
            let l = |ty: usize, tx: usize| luts[ty * tiles_x + tx][v] as f32;
            let res = (l(ty1, tx1) * (1.0 - xa) + l(ty1, tx2) * xa) * (1.0 - ya)
                + (l(ty2, tx1) * (1.0 - xa) + l(ty2, tx2) * xa) * ya;
            out[y * width + x] = res.round_ties_even().clamp(0.0, 255.0) as u8;
        }
    }
    Ok(out)
}

/// CLAHE applied to the L* channel of a color image; chroma is preserved.
pub fn clahe(img: &Image, params: ClaheParams) -> Result<Image> {
    let plane = luminance_plane(img);
    let eq = clahe_plane(&plane, img.height(), img.width(), params)?;
    Ok(with_luminance(img, &eq))
}
