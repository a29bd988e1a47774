use super::{LayerParams, Mode, RunningStats};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct BatchNormOutput {
    pub output: Tensor,
    /// Statistics used for normalization: batch moments in training mode,
    /// running moments in inference mode.
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
    /// Moving statistics after this batch (training mode only).
    pub updated_running: Option<RunningStats>,
}

fn channels(input: &Tensor, params: &LayerParams) -> Result<usize> {
    let c = *input.shape().last().unwrap_or(&0);
    if params.weights.shape() != [c] || params.bias.shape() != [c] {
        return Err(Error::dim(format!(
            "batch norm gamma {:?} / beta {:?} do not match input channels of {:?}",
            params.weights.shape(),
            params.bias.shape(),
            input.shape()
        )));
    }
    Ok(c)
}

fn running(params: &LayerParams) -> Result<&RunningStats> {
    params
        .running
        .as_ref()
        .ok_or_else(|| Error::dim("batch norm parameters carry no running statistics"))
}

/// Per-channel normalization over every axis but the last.
pub fn batchnorm(input: &Tensor, params: &LayerParams, mode: Mode, momentum: f32, epsilon: f32) -> Result<BatchNormOutput> {
    let c = channels(input, params)?;
    let run = running(params)?;
    let count = input.len() / c;
    let (mean, var) = match mode {
        Mode::Train => {
            if count == 0 {
                return Err(Error::Data("batch norm received an empty batch".into()));
            }
            let mut sum = vec![0.0f64; c];
            for px in input.data().chunks_exact(c) {
                for (s, &v) in sum.iter_mut().zip(px) {
                    *s += v as f64;
                }
            }
            let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
            let mut sq = vec![0.0f64; c];
            for px in input.data().chunks_exact(c) {
                for ((s, &v), m) in sq.iter_mut().zip(px).zip(&mean) {
                    *s += (v as f64 - m).powi(2);
                }
            }
            (
                mean.iter().map(|&m| m as f32).collect::<Vec<_>>(),
                sq.iter().map(|s| (s / count as f64) as f32).collect::<Vec<_>>(),
            )
        }
        Mode::Infer => (run.mean.data().to_vec(), run.var.data().to_vec()),
    };

    let gamma = params.weights.data();
    let beta = params.bias.data();
    let scale: Vec<f32> = (0..c).map(|i| gamma[i] / (var[i] + epsilon).sqrt()).collect();
    let mut out = input.data().to_vec();
    for px in out.chunks_exact_mut(c) {
        for i in 0..c {
            px[i] = (px[i] - mean[i]) * scale[i] + beta[i];
        }
    }

    let updated_running = (mode == Mode::Train).then(|| {
        let blend = |old: &Tensor, new: &[f32]| {
            Tensor::from_fn([c], |i| old.data()[i] * momentum + new[i] * (1.0 - momentum))
        };
        RunningStats {
            mean: blend(&run.mean, &mean),
            var: blend(&run.var, &var),
        }
    });

    Ok(BatchNormOutput {
        output: Tensor::new(input.shape().to_vec(), out)?,
        mean,
        var,
        updated_running,
    })
}

#[derive(Clone, Debug)]
pub struct BatchNormGrads {
    pub input: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
}

/// Gradients of [`batchnorm`]. `mean`/`var` are the statistics the forward
/// pass normalized with. In training mode they depend on the input, which
/// the input gradient accounts for.
pub fn batchnorm_backward(
    input: &Tensor,
    params: &LayerParams,
    mode: Mode,
    mean: &[f32],
    var: &[f32],
    epsilon: f32,
    grad_out: &Tensor,
) -> Result<BatchNormGrads> {
    let c = channels(input, params)?;
    if grad_out.shape() != input.shape() {
        return Err(Error::dim(format!(
            "batch norm upstream gradient {:?} does not match input {:?}",
            grad_out.shape(),
            input.shape()
        )));
    }
    let m = (input.len() / c) as f64;
    let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v as f64 + epsilon as f64).sqrt()).collect();
    let gamma = params.weights.data();

    let mut dgamma = vec![0.0f64; c];
    let mut dbeta = vec![0.0f64; c];
    for (px, g) in input.data().chunks_exact(c).zip(grad_out.data().chunks_exact(c)) {
        for i in 0..c {
            let xhat = (px[i] as f64 - mean[i] as f64) * inv_std[i];
            dgamma[i] += g[i] as f64 * xhat;
            dbeta[i] += g[i] as f64;
        }
    }

    let mut dx = vec![0.0f32; input.len()];
    for ((d, px), g) in dx
        .chunks_exact_mut(c)
        .zip(input.data().chunks_exact(c))
        .zip(grad_out.data().chunks_exact(c))
    {
        for i in 0..c {
            let gi = g[i] as f64;
            d[i] = match mode {
                Mode::Infer => (gi * gamma[i] as f64 * inv_std[i]) as f32,
                Mode::Train => {
                    let xhat = (px[i] as f64 - mean[i] as f64) * inv_std[i];
                    (gamma[i] as f64 * inv_std[i] / m * (m * gi - dbeta[i] - xhat * dgamma[i])) as f32
                }
            };
        }
    }

    Ok(BatchNormGrads {
        input: Tensor::new(input.shape().to_vec(), dx)?,
        gamma: Tensor::new([c], dgamma.into_iter().map(|v| v as f32).collect())?,
        beta: Tensor::new([c], dbeta.into_iter().map(|v| v as f32).collect())?,
    })
}
