//! Fundus-image preprocessing on 8-bit three-channel images.
//!
//! Pixels are stored interleaved in B, G, R order, the convention of the
//! OpenCV tooling most fundus corpora are prepared with. [`Image::load`] and
//! [`Image::save`] convert from and to the R, G, B order of image files, and
//! [`crate::augment::to_tensor`] converts to R, G, B at the tensor boundary.

mod blur;
mod clahe;
mod color;
mod resize;

use std::path::Path;

pub use blur::{blur_enhance, gaussian_blur, gaussian_kernel, kernel_radius, reflect_101, weighted_add};
pub use clahe::{clahe, clahe_plane, clip_histogram, clip_limit_for, ClaheParams, DEFAULT_CLIP_LIMIT, DEFAULT_GRID};
pub use color::{bgr_to_lab, lab_to_bgr, lightness_u8, luminance_plane, with_luminance};
pub use resize::resize;

use crate::error::{Error, Result};

/// Height x width x 3 image of `u8` samples in B, G, R order.
#[derive(Clone, PartialEq, Eq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl std::fmt::Debug for Image {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Image({}x{})", self.height, self.width)
    }
}

impl Image {
    pub const CHANNELS: usize = 3;

    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::dim(format!("empty image {height}x{width}")));
        }
        if data.len() != height * width * 3 {
            return Err(Error::dim(format!(
                "{height}x{width}x3 image needs {} bytes, got {}",
                height * width * 3,
                data.len()
            )));
        }
        Ok(Image { height, width, data })
    }

    /// Every pixel set to the same `[b, g, r]`.
    pub fn filled(height: usize, width: usize, bgr: [u8; 3]) -> Self {
        assert!(height > 0 && width > 0, "empty image");
        Image {
            height,
            width,
            data: bgr.iter().copied().cycle().take(height * width * 3).collect(),
        }
    }

    /// Build from `f(y, x) -> [b, g, r]`.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> [u8; 3]) -> Self {
        assert!(height > 0 && width > 0, "empty image");
        let mut data = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(y, x));
            }
        }
        Image { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    /// `[b, g, r]` at row `y`, column `x`.
    pub fn pixel(&self, y: usize, x: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, bgr: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&bgr);
    }

    /// Decode a PNG or JPEG file.
    pub fn load(path: &Path) -> Result<Image> {
        let rgb = image::open(path).map_err(|e| Error::file(path, e))?.to_rgb8();
        let (w, h) = rgb.dimensions();
        let mut data = rgb.into_raw();
        for px in data.chunks_exact_mut(3) {
            px.swap(0, 2);
        }
        Image::new(h as usize, w as usize, data).map_err(|e| Error::file(path, e))
    }

    /// Encode according to the file extension.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut data = self.data.clone();
        for px in data.chunks_exact_mut(3) {
            px.swap(0, 2);
        }
        let buf = image::RgbImage::from_raw(self.width as u32, self.height as u32, data)
            .expect("buffer length matches dimensions");
        buf.save(path).map_err(|e| Error::file(path, e))
    }
}
