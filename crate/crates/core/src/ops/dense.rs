use super::LayerParams;
use crate::error::{Error, Result};
use crate::par;
use crate::tensor::Tensor;

fn dims(input: &Tensor, params: &LayerParams) -> Result<(usize, usize, usize)> {
    let (n, nin) = match *input.shape() {
        [k] => (1, k),
        [n, k] => (n, k),
        _ => {
            return Err(Error::dim(format!(
                "dense input must be [N] or [batch, N], got {:?}",
                input.shape()
            )))
        }
    };
    let (win, wout) = match *params.weights.shape() {
        [a, b] => (a, b),
        _ => {
            return Err(Error::dim(format!(
                "dense weights must be [N, M], got {:?}",
                params.weights.shape()
            )))
        }
    };
    if win != nin || params.bias.shape() != [wout] {
        return Err(Error::dim(format!(
            "dense weights {:?} / bias {:?} incompatible with input {:?}",
            params.weights.shape(),
            params.bias.shape(),
            input.shape()
        )));
    }
    Ok((n, nin, wout))
}

fn out_shape(input: &Tensor, n: usize, m: usize) -> Vec<usize> {
    if input.rank() == 1 {
        vec![m]
    } else {
        vec![n, m]
    }
}

/// `input · W + b`.
pub fn dense(input: &Tensor, params: &LayerParams) -> Result<Tensor> {
    let (n, nin, m) = dims(input, params)?;
    let x = input.data();
    let w = params.weights.data();
    let mut out = vec![0.0f32; n * m];
    par::for_each_chunk_mut(&mut out, m, |b, row| {
        row.copy_from_slice(params.bias.data());
        for (i, &xi) in x[b * nin..(b + 1) * nin].iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            for (o, &wv) in row.iter_mut().zip(&w[i * m..(i + 1) * m]) {
                *o += xi * wv;
            }
        }
    });
    Tensor::new(out_shape(input, n, m), out)
}

#[derive(Clone, Debug)]
pub struct DenseGrads {
    pub input: Tensor,
    pub weights: Tensor,
    pub bias: Tensor,
}

pub fn dense_backward(input: &Tensor, params: &LayerParams, grad_out: &Tensor) -> Result<DenseGrads> {
    let (n, nin, m) = dims(input, params)?;
    if grad_out.len() != n * m {
        return Err(Error::dim(format!(
            "upstream gradient {:?} does not match dense output [{n}, {m}]",
            grad_out.shape()
        )));
    }
    let x = input.data();
    let w = params.weights.data();
    let dy = grad_out.data();

    let mut dx = vec![0.0f32; n * nin];
    par::for_each_chunk_mut(&mut dx, nin, |b, row| {
        let g = &dy[b * m..(b + 1) * m];
        for (i, d) in row.iter_mut().enumerate() {
            *d = w[i * m..(i + 1) * m].iter().zip(g).map(|(a, b)| a * b).sum();
        }
    });

    let mut dw = vec![0.0f32; nin * m];
    par::for_each_chunk_mut(&mut dw, m, |i, row| {
        for b in 0..n {
            let xi = x[b * nin + i];
            for (r, &g) in row.iter_mut().zip(&dy[b * m..(b + 1) * m]) {
                *r += xi * g;
            }
        }
    });

    let mut db = vec![0.0f64; m];
    for row in dy.chunks_exact(m) {
        for (d, &g) in db.iter_mut().zip(row) {
            *d += g as f64;
        }
    }

    Ok(DenseGrads {
        input: Tensor::new(input.shape().to_vec(), dx)?,
        weights: Tensor::new([nin, m], dw)?,
        bias: Tensor::new([m], db.into_iter().map(|v| v as f32).collect())?,
    })
}
