//! 8-bit sRGB <-> CIE L*a*b* (D65) in the fixed-point arithmetic of OpenCV's
//! `COLOR_BGR2Lab` / `COLOR_Lab2BGR`, so luminance-only CLAHE matches it
//! pixel for pixel.
//!
//! The 8-bit planes store `L * 255 / 100`, `a + 128` and `b + 128`.

use std::sync::OnceLock;

use super::Image;

const WHITE: [f64; 3] = [0.950_456, 1.0, 1.088_754];
const RGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.412_453, 0.357_580, 0.180_423],
    [0.212_671, 0.715_160, 0.072_169],
    [0.019_334, 0.119_193, 0.950_227],
];
const XYZ_TO_RGB: [[f64; 3]; 3] = [
    [3.240_479, -1.537_15, -0.498_535],
    [-0.969_256, 1.875_991, 0.041_556],
    [0.055_648, -0.204_043, 1.057_311],
];

const LAB_SHIFT: u32 = 12;
const GAMMA_SHIFT: u32 = 3;
const LAB_SHIFT2: u32 = LAB_SHIFT + GAMMA_SHIFT;
const CBRT_TAB_SIZE: usize = 256 * 3 / 2 * (1 << GAMMA_SHIFT);
const L_SCALE: i32 = (116 * 255 + 50) / 100;
const L_SHIFT: i32 = -((16 * 255 * (1 << LAB_SHIFT2) + 50) / 100);

const INV_GAMMA_SHIFT: u32 = 12;
const INV_GAMMA_TAB_SIZE: usize = 1 << INV_GAMMA_SHIFT;
const BASE: i32 = 1 << 14;
const INV_SHIFT: u32 = LAB_SHIFT + (14 - INV_GAMMA_SHIFT);
const MIN_AB: i32 = -8145;

fn apply_gamma(x: f32) -> f32 {
    let x = x as f64;
    let v = if x <= 809.0 / 20000.0 {
        x / (323.0 / 25.0)
    } else {
        let shift = 11.0 / 200.0;
        ((x + shift) / (1.0 + shift)).powf(12.0 / 5.0)
    };
    v as f32
}

fn apply_inv_gamma(x: f32) -> f32 {
    let x = x as f64;
    let v = if x <= 7827.0 / 2_500_000.0 {
        x * (323.0 / 25.0)
    } else {
        let shift = 11.0 / 200.0;
        x.powf(1.0 / (12.0 / 5.0)) * (1.0 + shift) - shift
    };
    v as f32
}

/// Cube root of a positive finite f32 by OpenCV's rational approximation,
/// which truncates rather than rounds the result mantissa.
fn cbrt_f32(x: f32) -> f32 {
    if x == 0.0 {
        return 0.0;
    }
    let bits = x.to_bits();
    let ex = ((bits >> 23) & 0xff) as i32 - 127;
    let mut shx = ex % 3;
    if shx >= 0 {
        shx -= 3;
    }
    let ex = (ex - shx) / 3 - 1;
    let fr = f64::from_bits((((shx + 1023) as u64) << 52) | (((bits & 0x7f_ffff) as u64) << 29));
    let a = [45.254_833_975_680_3, 192.279_836_835_506_1, 119.165_482_428_558_16, 13.432_501_390_862_399, 0.163_616_122_658_575_42];
    let b = [14.808_840_932_191_346, 151.971_405_104_443_56, 168.525_441_410_156_82, 33.990_594_135_021_56, 1.0];
    let num = (((a[0] * fr + a[1]) * fr + a[2]) * fr + a[3]) * fr + a[4];
    let den = (((b[0] * fr + b[1]) * fr + b[2]) * fr + b[3]) * fr + b[4];
    let mant = ((num / den).to_bits() & ((1u64 << 52) - 1)) >> 29;
    f32::from_bits((((ex + 127) as u32) << 23) | mant as u32)
}

fn round_i32(v: f32) -> i32 {
    v.round_ties_even() as i32
}

struct Tables {
    gamma: [i32; 256],
    cbrt: Vec<i32>,
    /// Rows X, Y, Z applied to linear R, G, B.
    forward: [[i32; 3]; 3],
    inv_gamma: Vec<i32>,
    /// `(y, f(y))` per 8-bit L.
    l_to_yf: [(i32, i32); 256],
    ab_to_xz: Vec<i32>,
    /// Rows R, G, B applied to X, Y, Z.
    inverse: [[i32; 3]; 3],
}

fn tables() -> &'static Tables {
    static TABLES: OnceLock<Tables> = OnceLock::new();
    TABLES.get_or_init(|| {
        let int_scale = (255 * (1 << GAMMA_SHIFT)) as f32;
        let gamma = std::array::from_fn(|i| round_i32(int_scale * apply_gamma(i as f32 / 255.0)));

        let lthresh = 216.0f32 / 24389.0;
        let lscale = 841.0f32 / 108.0;
        let lbias = 16.0f32 / 116.0;
        let cb_scale = 1.0f32 / (255.0 * (1 << GAMMA_SHIFT) as f32);
        let lshift2 = (1 << LAB_SHIFT2) as f32;
        let cbrt = (0..CBRT_TAB_SIZE)
            .map(|i| {
                let x = cb_scale * i as f32;
                let v = if x < lthresh { x.mul_add(lscale, lbias) } else { cbrt_f32(x) };
                round_i32(lshift2 * v)
            })
            .collect();

        let lshift = (1 << LAB_SHIFT) as f64;
        let forward = std::array::from_fn(|i| {
            std::array::from_fn(|j| (lshift * RGB_TO_XYZ[i][j] / WHITE[i]).round_ties_even() as i32)
        });
        let inverse = std::array::from_fn(|i| {
            std::array::from_fn(|j| (lshift * XYZ_TO_RGB[i][j] * WHITE[j]).round_ties_even() as i32)
        });

        let inv_scale = 1.0f32 / INV_GAMMA_TAB_SIZE as f32;
        let inv_gamma = (0..INV_GAMMA_TAB_SIZE)
            .map(|i| round_i32(255.0f32 * apply_inv_gamma(inv_scale * i as f32)))
            .collect();

        let l_to_yf = std::array::from_fn(|i| {
            let i = i as i32;
            if i <= 20 {
                let y = round_i32((i * BASE * 20 * 9) as f32 / (17 * 29 * 29 * 29) as f32);
                let fy = BASE as f32 * (16.0f32 / 116.0 + (i * 5) as f32 / (3 * 17 * 29) as f32);
                (y, round_i32(fy))
            } else {
                let fy = (i * 100 * BASE) as f32 / (255 * 116) as f32 + (16 * BASE) as f32 / 116.0;
                (round_i32(fy * fy * fy / (BASE * BASE) as f32), round_i32(fy))
            }
        });

        let ab_to_xz = (MIN_AB..BASE * 9 / 4 + MIN_AB)
            .map(|i| if i <= 3390 { i * 108 / 841 - BASE * 16 / 116 * 108 / 841 } else { i * i / BASE * i / BASE })
            .collect();

        Tables { gamma, cbrt, forward, inv_gamma, l_to_yf, ab_to_xz, inverse }
    })
}

fn descale(x: i32, n: u32) -> i32 {
    (x + (1 << (n - 1))) >> n
}

fn dot(row: [i32; 3], v: [i32; 3]) -> i32 {
    row[0] * v[0] + row[1] * v[1] + row[2] * v[2]
}

fn saturate(v: i32) -> u8 {
    v.clamp(0, 255) as u8
}

/// One B, G, R pixel to 8-bit `[L, a, b]`.
pub fn bgr_to_lab(bgr: [u8; 3]) -> [u8; 3] {
    let t = tables();
    let rgb = [bgr[2], bgr[1], bgr[0]].map(|v| t.gamma[v as usize]);
    let [fx, fy, fz] = t.forward.map(|row| t.cbrt[descale(dot(row, rgb), LAB_SHIFT) as usize]);
    let ab_bias = 128 << LAB_SHIFT2;
    [
        descale(L_SCALE * fy + L_SHIFT, LAB_SHIFT2),
        descale(500 * (fx - fy) + ab_bias, LAB_SHIFT2),
        descale(200 * (fy - fz) + ab_bias, LAB_SHIFT2),
    ]
    .map(saturate)
}

/// 8-bit `[L, a, b]` to one B, G, R pixel.
pub fn lab_to_bgr(lab: [u8; 3]) -> [u8; 3] {
    let t = tables();
    let (y, fy) = t.l_to_yf[lab[0] as usize];
    let (aa, bb) = (lab[1] as i32, lab[2] as i32);
    let adiv = ((5 * aa * 53687 + (1 << 7)) >> 13) - 128 * BASE / 500;
    let bdiv = ((bb * 41943 + (1 << 4)) >> 9) - 128 * BASE / 200 + 1;
    let xz = |v: i32| t.ab_to_xz[(v - MIN_AB) as usize];
    let xyz = [xz(fy + adiv), y, xz(fy - bdiv)];
    let [r, g, b] = t.inverse.map(|row| {
        let v = descale(dot(row, xyz), INV_SHIFT).clamp(0, INV_GAMMA_TAB_SIZE as i32 - 1);
        saturate(t.inv_gamma[v as usize])
    });
    [b, g, r]
}

/// 8-bit lightness (`L * 255 / 100`) of one B, G, R pixel.
pub fn lightness_u8(bgr: [u8; 3]) -> u8 {
    bgr_to_lab(bgr)[0]
}

/// 8-bit lightness plane of a B, G, R image.
pub fn luminance_plane(img: &Image) -> Vec<u8> {
    img.data().chunks_exact(3).map(|p| lightness_u8([p[0], p[1], p[2]])).collect()
}

/// Replace the lightness of `img` with `plane`, keeping each pixel's 8-bit
/// a*/b*. Every pixel goes through the Lab round trip, as in OpenCV.
pub fn with_luminance(img: &Image, plane: &[u8]) -> Image {
    assert_eq!(plane.len(), img.height() * img.width(), "plane size");
    let mut out = img.clone();
    for (px, &l) in out.data_mut().chunks_exact_mut(3).zip(plane) {
        let [_, a, b] = bgr_to_lab([px[0], px[1], px[2]]);
        px.copy_from_slice(&lab_to_bgr([l, a, b]));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_points() {
        assert_eq!(bgr_to_lab([255, 255, 255]), [255, 128, 128]);
        assert_eq!(bgr_to_lab([0, 0, 0]), [0, 128, 128]);
        assert_eq!(lab_to_bgr([255, 128, 128]), [255, 255, 255]);
        assert_eq!(lab_to_bgr([0, 128, 128]), [0, 0, 0]);
    }

    #[test]
    fn round_trip_matches_opencv() {
        let cases = [
            ([30u8, 200, 10], [30u8, 200, 0]),
            ([0, 0, 255], [1, 2, 255]),
            ([128, 128, 128], [128, 128, 128]),
            ([250, 7, 3], [251, 8, 0]),
        ];
        for (bgr, expected) in cases {
            assert_eq!(lab_to_bgr(bgr_to_lab(bgr)), expected, "{bgr:?}");
        }
    }

    #[test]
    fn gray_stays_gray() {
        for v in [0u8, 17, 128, 201, 255] {
            let [l, a, b] = bgr_to_lab([v; 3]);
            assert_eq!((a, b), (128, 128));
            let [b0, g0, r0] = lab_to_bgr([l, a, b]);
            assert!(b0 == g0 && g0 == r0, "{v}");
        }
    }
}
