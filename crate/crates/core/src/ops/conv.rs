use serde::{Deserialize, Serialize};

use super::{image_shape, nhwc, LayerParams};
use crate::error::{Error, Result};
use crate::par;
use crate::tensor::Tensor;

/// Spatial padding policy for convolutions.
///
/// `Same` pads so that the output length is `ceil(len / stride)`; when the
/// total padding is odd the extra pixel goes to the bottom/right.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    Same,
    Valid,
    Explicit(usize),
}

/// Output length and leading pad along one axis, or `None` when the kernel
/// does not fit.
pub fn conv_output_len(len: usize, kernel: usize, stride: usize, padding: Padding) -> Option<(usize, usize)> {
    if stride == 0 || kernel == 0 || len == 0 {
        return None;
    }
    match padding {
        Padding::Same => {
            let out = len.div_ceil(stride);
            let total = ((out - 1) * stride + kernel).saturating_sub(len);
            Some((out, total / 2))
        }
        Padding::Valid => (kernel <= len).then(|| ((len - kernel) / stride + 1, 0)),
        Padding::Explicit(p) => {
            let padded = len + 2 * p;
            (kernel <= padded).then(|| ((padded - kernel) / stride + 1, p))
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    n: usize,
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    cout: usize,
    sh: usize,
    sw: usize,
    pad_top: usize,
    pad_left: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn new(input: &Tensor, params: &LayerParams, stride: (usize, usize), padding: Padding) -> Result<Self> {
        let (n, h, w, cin) = nhwc(input)?;
        let (kh, kw, wcin, cout) = match *params.weights.shape() {
            [a, b, c, d] => (a, b, c, d),
            _ => {
                return Err(Error::dim(format!(
                    "convolution weights must be [k_h, k_w, c_in, c_out], got {:?}",
                    params.weights.shape()
                )))
            }
        };
        if wcin != cin {
            return Err(Error::dim(format!(
                "convolution weights {:?} expect {wcin} input channels but input {:?} has {cin}",
                params.weights.shape(),
                input.shape()
            )));
        }
        if params.bias.shape() != [cout] {
            return Err(Error::dim(format!(
                "convolution bias {:?} does not match weights {:?}",
                params.bias.shape(),
                params.weights.shape()
            )));
        }
        let (sh, sw) = stride;
        let rows = conv_output_len(h, kh, sh, padding);
        let cols = conv_output_len(w, kw, sw, padding);
        let ((oh, pad_top), (ow, pad_left)) = match (rows, cols) {
            (Some(r), Some(c)) => (r, c),
            _ => {
                return Err(Error::dim(format!(
                    "kernel {kh}x{kw} with stride {stride:?} and padding {padding:?} does not fit input {:?}",
                    input.shape()
                )))
            }
        };
        Ok(Geometry {
            n,
            h,
            w,
            cin,
            kh,
            kw,
            cout,
            sh,
            sw,
            pad_top,
            pad_left,
            oh,
            ow,
        })
    }

    /// Input row for output row `oy` and kernel row `ky`, if inside the image.
    #[inline]
    fn in_row(&self, oy: usize, ky: usize) -> Option<usize> {
        (oy * self.sh + ky).checked_sub(self.pad_top).filter(|&r| r < self.h)
    }

    #[inline]
    fn in_col(&self, ox: usize, kx: usize) -> Option<usize> {
        (ox * self.sw + kx).checked_sub(self.pad_left).filter(|&c| c < self.w)
    }
}

/// 2-D cross-correlation plus bias.
pub fn conv2d(input: &Tensor, params: &LayerParams, stride: (usize, usize), padding: Padding) -> Result<Tensor> {
    let g = Geometry::new(input, params, stride, padding)?;
    let x = input.data();
    let wt = params.weights.data();
    let bias = params.bias.data();
    let row_len = g.ow * g.cout;
    let mut out = vec![0.0f32; g.n * g.oh * row_len];

    // One work item per (batch, output row).
    par::for_each_chunk_mut(&mut out, row_len, |row_idx, row| {
        let (b, oy) = (row_idx / g.oh, row_idx % g.oh);
        for ox in 0..g.ow {
            let acc = &mut row[ox * g.cout..(ox + 1) * g.cout];
            acc.copy_from_slice(bias);
            for ky in 0..g.kh {
                let Some(iy) = g.in_row(oy, ky) else { continue };
                for kx in 0..g.kw {
                    let Some(ix) = g.in_col(ox, kx) else { continue };
                    let px = &x[((b * g.h + iy) * g.w + ix) * g.cin..][..g.cin];
                    let wbase = (ky * g.kw + kx) * g.cin * g.cout;
                    for (ci, &v) in px.iter().enumerate() {
                        if v == 0.0 {
                            continue;
                        }
                        let wrow = &wt[wbase + ci * g.cout..][..g.cout];
                        for (a, &wv) in acc.iter_mut().zip(wrow) {
                            *a += v * wv;
                        }
                    }
                }
            }
        }
    });
    Tensor::new(image_shape(input, g.n, g.oh, g.ow, g.cout), out)
}

#[derive(Clone, Debug)]
pub struct Conv2dGrads {
    pub input: Tensor,
    pub weights: Tensor,
    pub bias: Tensor,
}

/// Gradients of [`conv2d`] with respect to input, weights and bias.
pub fn conv2d_backward(
    input: &Tensor,
    params: &LayerParams,
    stride: (usize, usize),
    padding: Padding,
    grad_out: &Tensor,
) -> Result<Conv2dGrads> {
    let g = Geometry::new(input, params, stride, padding)?;
    let dx = conv2d_backward_input(input, params, stride, padding, grad_out)?;
    let x = input.data();
    let dy = grad_out.data();

    // Weight gradient: one work item per kernel position (ky, kx), each owning
    // a [c_in, c_out] block.
    let block = g.cin * g.cout;
    let mut dw = vec![0.0f32; g.kh * g.kw * block];
    par::for_each_chunk_mut(&mut dw, block, |pos, blk| {
        let (ky, kx) = (pos / g.kw, pos % g.kw);
        for b in 0..g.n {
            for oy in 0..g.oh {
                let Some(iy) = g.in_row(oy, ky) else { continue };
                for ox in 0..g.ow {
                    let Some(ix) = g.in_col(ox, kx) else { continue };
                    let px = &x[((b * g.h + iy) * g.w + ix) * g.cin..][..g.cin];
                    let gy = &dy[((b * g.oh + oy) * g.ow + ox) * g.cout..][..g.cout];
                    for (ci, &v) in px.iter().enumerate() {
                        if v == 0.0 {
                            continue;
                        }
                        let row = &mut blk[ci * g.cout..(ci + 1) * g.cout];
                        for (r, &gv) in row.iter_mut().zip(gy) {
                            *r += v * gv;
                        }
                    }
                }
            }
        }
    });

    let mut db = vec![0.0f64; g.cout];
    for px in dy.chunks_exact(g.cout) {
        for (d, &v) in db.iter_mut().zip(px) {
            *d += v as f64;
        }
    }

    Ok(Conv2dGrads {
        input: dx,
        weights: Tensor::new(params.weights.shape().to_vec(), dw)?,
        bias: Tensor::new([g.cout], db.into_iter().map(|v| v as f32).collect())?,
    })
}

/// Input gradient only; used when the layer itself is frozen.
pub(crate) fn conv2d_backward_input(
    input: &Tensor,
    params: &LayerParams,
    stride: (usize, usize),
    padding: Padding,
    grad_out: &Tensor,
) -> Result<Tensor> {
    let g = Geometry::new(input, params, stride, padding)?;
    let expected = image_shape(input, g.n, g.oh, g.ow, g.cout);
    if grad_out.shape() != expected.as_slice() {
        return Err(Error::dim(format!(
            "upstream gradient {:?} does not match convolution output {expected:?}",
            grad_out.shape()
        )));
    }
    let dy = grad_out.data();
    let wt = params.weights.data();
    let row_len = g.w * g.cin;
    let mut dx = vec![0.0f32; g.n * g.h * row_len];

    // Gather form: each input row collects from every output position whose
    // window covers it, so rows are independent.
    par::for_each_chunk_mut(&mut dx, row_len, |row_idx, row| {
        let (b, iy) = (row_idx / g.h, row_idx % g.h);
        for ky in 0..g.kh {
            let Some(num) = (iy + g.pad_top).checked_sub(ky) else { continue };
            if num % g.sh != 0 || num / g.sh >= g.oh {
                continue;
            }
            let oy = num / g.sh;
            for ix in 0..g.w {
                let px = &mut row[ix * g.cin..(ix + 1) * g.cin];
                for kx in 0..g.kw {
                    let Some(numx) = (ix + g.pad_left).checked_sub(kx) else { continue };
                    if numx % g.sw != 0 || numx / g.sw >= g.ow {
                        continue;
                    }
                    let ox = numx / g.sw;
                    let gy = &dy[((b * g.oh + oy) * g.ow + ox) * g.cout..][..g.cout];
                    let wbase = (ky * g.kw + kx) * g.cin * g.cout;
                    for (ci, p) in px.iter_mut().enumerate() {
                        let wrow = &wt[wbase + ci * g.cout..][..g.cout];
                        let dot: f32 = wrow.iter().zip(gy).map(|(a, b)| a * b).sum();
                        *p += dot;
                    }
                }
            }
        }
    });
    Tensor::new(input.shape().to_vec(), dx)
}
