use super::{image_shape, nhwc};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Symmetric zero padding of `pad.0` rows and `pad.1` columns on each side.
pub fn zero_pad2d(input: &Tensor, pad: (usize, usize)) -> Result<Tensor> {
    let (n, h, w, c) = nhwc(input)?;
    let (ph, pw) = pad;
    let (oh, ow) = (h + 2 * ph, w + 2 * pw);
    let mut out = vec![0.0f32; n * oh * ow * c];
    let x = input.data();
    for b in 0..n {
        for y in 0..h {
            let src = &x[((b * h + y) * w) * c..][..w * c];
            let dst = ((b * oh + y + ph) * ow + pw) * c;
            out[dst..dst + w * c].copy_from_slice(src);
        }
    }
    Tensor::new(image_shape(input, n, oh, ow, c), out)
}

/// Crops the padded border back off the upstream gradient.
pub fn zero_pad2d_backward(input: &Tensor, pad: (usize, usize), grad_out: &Tensor) -> Result<Tensor> {
    let (n, h, w, c) = nhwc(input)?;
    let (ph, pw) = pad;
    let (oh, ow) = (h + 2 * ph, w + 2 * pw);
    if grad_out.len() != n * oh * ow * c {
        return Err(Error::dim(format!(
            "upstream gradient {:?} does not match padded output [{n}, {oh}, {ow}, {c}]",
            grad_out.shape()
        )));
    }
    let g = grad_out.data();
    let mut dx = Vec::with_capacity(input.len());
    for b in 0..n {
        for y in 0..h {
            let src = ((b * oh + y + ph) * ow + pw) * c;
            dx.extend_from_slice(&g[src..src + w * c]);
        }
    }
    Tensor::new(input.shape().to_vec(), dx)
}
