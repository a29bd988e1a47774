use super::{image_shape, nhwc};
use crate::error::{Error, Result};
use crate::par;
use crate::tensor::Tensor;

fn pool_geometry(
    input: &Tensor,
    pool: (usize, usize),
    stride: (usize, usize),
) -> Result<(usize, usize, usize, usize, usize, usize)> {
    let (n, h, w, c) = nhwc(input)?;
    if pool.0 == 0 || pool.1 == 0 || stride.0 == 0 || stride.1 == 0 {
        return Err(Error::dim(format!(
            "pool {pool:?} and stride {stride:?} must be positive"
        )));
    }
    if pool.0 > h || pool.1 > w {
        return Err(Error::dim(format!(
            "pool {pool:?} larger than input {:?}",
            input.shape()
        )));
    }
    Ok((n, h, w, c, (h - pool.0) / stride.0 + 1, (w - pool.1) / stride.1 + 1))
}

/// Index (within the image) of the maximum of each window and channel.
/// Ties resolve to the first element in row-major scan order.
#[allow(clippy::too_many_arguments)]
fn argmax(x: &[f32], w: usize, c: usize, oy: usize, ox: usize, ch: usize, pool: (usize, usize), stride: (usize, usize)) -> usize {
    let mut best = usize::MAX;
    let mut best_val = f32::NEG_INFINITY;
    for py in 0..pool.0 {
        let iy = oy * stride.0 + py;
        for px in 0..pool.1 {
            let ix = ox * stride.1 + px;
            let idx = (iy * w + ix) * c + ch;
            if best == usize::MAX || x[idx] > best_val {
                best = idx;
                best_val = x[idx];
            }
        }
    }
    best
}

/// Max pooling without padding. `stride` is usually equal to `pool`.
pub fn maxpool2d(input: &Tensor, pool: (usize, usize), stride: (usize, usize)) -> Result<Tensor> {
    let (n, h, w, c, oh, ow) = pool_geometry(input, pool, stride)?;
    let x = input.data();
    let img = h * w * c;
    let mut out = vec![0.0f32; n * oh * ow * c];
    par::for_each_chunk_mut(&mut out, ow * c, |row_idx, row| {
        let (b, oy) = (row_idx / oh, row_idx % oh);
        let xb = &x[b * img..(b + 1) * img];
        for ox in 0..ow {
            for ch in 0..c {
                row[ox * c + ch] = xb[argmax(xb, w, c, oy, ox, ch, pool, stride)];
            }
        }
    });
    Tensor::new(image_shape(input, n, oh, ow, c), out)
}

/// Routes each upstream gradient to the argmax of its window.
pub fn maxpool2d_backward(
    input: &Tensor,
    pool: (usize, usize),
    stride: (usize, usize),
    grad_out: &Tensor,
) -> Result<Tensor> {
    let (n, h, w, c, oh, ow) = pool_geometry(input, pool, stride)?;
    if grad_out.len() != n * oh * ow * c {
        return Err(Error::dim(format!(
            "upstream gradient {:?} does not match pooled output [{n}, {oh}, {ow}, {c}]",
            grad_out.shape()
        )));
    }
    let x = input.data();
    let dy = grad_out.data();
    let img = h * w * c;
    let mut dx = vec![0.0f32; n * img];
    // Windows may overlap, so scatter sequentially within each image.
    par::for_each_chunk_mut(&mut dx, img, |b, dxb| {
        let xb = &x[b * img..(b + 1) * img];
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    let g = dy[((b * oh + oy) * ow + ox) * c + ch];
                    dxb[argmax(xb, w, c, oy, ox, ch, pool, stride)] += g;
                }
            }
        }
    });
    Tensor::new(input.shape().to_vec(), dx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn single_window() {
        let x = Tensor::new([2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = maxpool2d(&x, (2, 2), (2, 2)).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1]);
        assert_eq!(y.data(), &[4.0]);
    }

    #[test]
    fn vgg_block_shape() {
        let x = Tensor::zeros([224, 224, 64]);
        assert_eq!(maxpool2d(&x, (2, 2), (2, 2)).unwrap().shape(), &[112, 112, 64]);
    }

    #[test]
    fn random_input_matches_exhaustive_window_max() {
        let mut rng = seeded(5);
        let x = Tensor::uniform([4, 4, 2], -1.0, 1.0, &mut rng);
        let y = maxpool2d(&x, (2, 2), (2, 2)).unwrap();
        for oy in 0..2 {
            for ox in 0..2 {
                for c in 0..2 {
                    let m = [(0, 0), (0, 1), (1, 0), (1, 1)]
                        .iter()
                        .map(|&(dy, dx)| x.at(&[2 * oy + dy, 2 * ox + dx, c]))
                        .fold(f32::NEG_INFINITY, f32::max);
                    assert_eq!(y.at(&[oy, ox, c]), m);
                }
            }
        }
    }

    #[test]
    fn ties_route_to_first_in_scan_order() {
        let x = Tensor::full([2, 2, 1], 1.0);
        let g = maxpool2d_backward(&x, (2, 2), (2, 2), &Tensor::full([1, 1, 1], 3.0)).unwrap();
        assert_eq!(g.data(), &[3.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn unit_pool_is_identity() {
        let mut rng = seeded(2);
        let x = Tensor::uniform([3, 5, 2], -1.0, 1.0, &mut rng);
        assert_eq!(maxpool2d(&x, (1, 1), (1, 1)).unwrap(), x);
    }

    #[test]
    fn oversized_pool_is_rejected() {
        let x = Tensor::zeros([1, 3, 1]);
        assert!(matches!(maxpool2d(&x, (2, 2), (2, 2)), Err(Error::Dimension(_))));
    }

    #[test]
    fn backward_conserves_gradient_mass() {
        let mut rng = seeded(9);
        for (pool, stride) in [((2, 2), (2, 2)), ((3, 3), (1, 1)), ((2, 3), (1, 2))] {
            let x = Tensor::uniform([2, 7, 6, 3], -1.0, 1.0, &mut rng);
            let y = maxpool2d(&x, pool, stride).unwrap();
            let dy = Tensor::uniform(y.shape().to_vec(), -1.0, 1.0, &mut rng);
            let dx = maxpool2d_backward(&x, pool, stride, &dy).unwrap();
            assert!((dx.sum() - dy.sum()).abs() < 1e-5);
        }
    }
}
