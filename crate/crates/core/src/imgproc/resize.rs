use super::Image;
use crate::error::{Error, Result};

/// Source coordinate and blend weight for destination index `d`, using
/// pixel-center alignment clamped to the image.
fn source(d: usize, src_len: usize, dst_len: usize) -> (usize, usize, f64) {
    let scale = src_len as f64 / dst_len as f64;
    let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (src_len - 1) as f64);
    let i0 = s.floor() as usize;
    let i1 = (i0 + 1).min(src_len - 1);
    (i0, i1, s - i0 as f64)
}

/// Bilinear resize to `width x height`.
pub fn resize(img: &Image, (width, height): (usize, usize)) -> Result<Image> {
    if width == 0 || height == 0 {
        return Err(Error::dim(format!("resize target {width}x{height} is empty")));
    }
    if width == img.width() && height == img.height() {
        return Ok(img.clone());
    }
    let cols: Vec<_> = (0..width).map(|x| source(x, img.width(), width)).collect();
    let mut out = Vec::with_capacity(width * height * 3);
    for y in 0..height {
        let (y0, y1, fy) = source(y, img.height(), height);
        for &(x0, x1, fx) in &cols {
            let (a, b, c, d) = (img.pixel(y0, x0), img.pixel(y0, x1), img.pixel(y1, x0), img.pixel(y1, x1));
            for ch in 0..3 {
                let top = a[ch] as f64 * (1.0 - fx) + b[ch] as f64 * fx;
                let bottom = c[ch] as f64 * (1.0 - fx) + d[ch] as f64 * fx;
                let v = top * (1.0 - fy) + bottom * fy;
                out.push(v.round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    Image::new(height, width, out)
}
