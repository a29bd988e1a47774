use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Mode;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Validated dropout rate in `[0, 1)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dropout {
    rate: f32,
}

impl Dropout {
    pub fn new(rate: f32) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::config(format!("dropout rate {rate} outside [0, 1)")));
        }
        Ok(Dropout { rate })
    }

    pub fn rate(self) -> f32 {
        self.rate
    }
}

/// Inverted dropout. In training mode each unit is zeroed with probability
/// `rate` and survivors are scaled by `1 / (1 - rate)`; inference is the
/// identity. Returns the per-unit multipliers used, if any.
pub fn dropout(input: &Tensor, rate: f32, mode: Mode, rng: &mut impl Rng) -> Result<(Tensor, Option<Vec<f32>>)> {
    let rate = Dropout::new(rate)?.rate;
    if mode == Mode::Infer || rate == 0.0 {
        return Ok((input.clone(), None));
    }
    let keep = 1.0 / (1.0 - rate);
    let mask: Vec<f32> = (0..input.len())
        .map(|_| if rng.random::<f32>() < rate { 0.0 } else { keep })
        .collect();
    let data = input.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
    Ok((Tensor::new(input.shape().to_vec(), data)?, Some(mask)))
}

pub fn dropout_backward(mask: Option<&[f32]>, grad_out: &Tensor) -> Result<Tensor> {
    match mask {
        None => Ok(grad_out.clone()),
        Some(m) if m.len() == grad_out.len() => {
            let data = grad_out.data().iter().zip(m).map(|(g, k)| g * k).collect();
            Tensor::new(grad_out.shape().to_vec(), data)
        }
        Some(m) => Err(Error::dim(format!(
            "dropout mask of {} units for gradient {:?}",
            m.len(),
            grad_out.shape()
        ))),
    }
}
