//! CLAHE fixtures produced by OpenCV (`tests/fixtures/gen_clahe.py`).

use fundus::imgproc::{clahe, clahe_plane, ClaheParams, Image};

#[derive(serde::Deserialize)]
pub struct ClaheCase {
    pub clip: f64,
    /// Tiles along x and y.
    pub grid: [usize; 2],
    pub height: usize,
    pub width: usize,
    pub input: Vec<u8>,
    pub output: Vec<u8>,
}

impl ClaheCase {
    pub fn params(&self) -> ClaheParams {
        ClaheParams {
            clip_limit: self.clip,
            grid: (self.grid[0], self.grid[1]),
        }
    }
}

/// Single-channel cases.
pub fn gray_cases() -> Vec<ClaheCase> {
    serde_json::from_str(include_str!("../fixtures/clahe_gray_opencv.json")).unwrap()
}

/// B, G, R cases equalized on the Lab lightness channel.
pub fn color_cases() -> Vec<ClaheCase> {
    serde_json::from_str(include_str!("../fixtures/clahe_color_opencv.json")).unwrap()
}

/// Pixels differing from the fixture output.
pub fn gray_mismatches(case: &ClaheCase) -> usize {
    let out = clahe_plane(&case.input, case.height, case.width, case.params()).unwrap();
    out.iter().zip(&case.output).filter(|(a, b)| a != b).count()
}

pub fn color_mismatches(case: &ClaheCase) -> usize {
    let img = Image::new(case.height, case.width, case.input.clone()).unwrap();
    let out = clahe(&img, case.params()).unwrap();
    out.data().iter().zip(&case.output).filter(|(a, b)| a != b).count()
}
