//! Layer kernels: forward and backward passes over NHWC tensors.
//!
//! Each kernel is a pure function. Backward functions take the forward
//! inputs (and, where cheaper, the forward output) plus the upstream
//! gradient, and return gradients as fresh tensors. Image kernels accept a
//! single `[H, W, C]` image or a `[N, H, W, C]` batch.

mod activation;
mod batchnorm;
mod conv;
mod dense;
mod dropout;
mod loss;
mod pad;
mod pool;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use activation::{activation, activation_backward, Activation};
pub use batchnorm::{batchnorm, batchnorm_backward, BatchNormGrads, BatchNormOutput};
pub use conv::{conv2d, conv2d_backward, conv_output_len, Conv2dGrads, Padding};
pub(crate) use conv::conv2d_backward_input;
pub use dense::{dense, dense_backward, DenseGrads};
pub use dropout::{dropout, dropout_backward, Dropout};
pub use loss::{
    binary_crossentropy, binary_crossentropy_grad, bce_sigmoid_logit_grad, clamp_prob,
    l2_accumulate_grad, l2_penalty, BCE_EPSILON,
};
pub use pad::{zero_pad2d, zero_pad2d_backward};
pub use pool::{maxpool2d, maxpool2d_backward};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Whether a layer runs with training-time behaviour.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Infer,
}

/// Running per-channel statistics of a batch-normalization layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Tensor,
    pub var: Tensor,
}

/// Parameters of one layer.
///
/// Convolutions store weights as `[k_h, k_w, c_in, c_out]` with bias
/// `[c_out]`; dense layers `[n_in, n_out]` with bias `[n_out]`.
/// Batch normalization keeps gamma in `weights`, beta in `bias` and its
/// moving statistics in `running`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub weights: Tensor,
    pub bias: Tensor,
    pub trainable: bool,
    pub running: Option<RunningStats>,
}

impl LayerParams {
    pub fn new(weights: Tensor, bias: Tensor) -> Self {
        LayerParams {
            weights,
            bias,
            trainable: true,
            running: None,
        }
    }

    /// Weight and bias element count (running statistics excluded).
    pub fn trainable_size(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    /// Every stored element, running statistics included.
    pub fn total_size(&self) -> usize {
        self.trainable_size()
            + self
                .running
                .as_ref()
                .map_or(0, |r| r.mean.len() + r.var.len())
    }

    /// Tensors in serialization order.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.weights, &self.bias];
        if let Some(r) = &self.running {
            out.push(&r.mean);
            out.push(&r.var);
        }
        out
    }

    pub fn clear_grads(&mut self) {
        self.weights.clear_grad();
        self.bias.clear_grad();
    }
}

/// Parameters of every parametric layer, keyed by layer name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct WeightStore {
    layers: BTreeMap<String, LayerParams>,
}

impl WeightStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, params: LayerParams) -> Option<LayerParams> {
        self.layers.insert(name.into(), params)
    }

    pub fn get(&self, name: &str) -> Option<&LayerParams> {
        self.layers.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut LayerParams> {
        self.layers.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.layers.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// Layers in name order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &LayerParams)> {
        self.layers.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut LayerParams)> {
        self.layers.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Names of layers whose parameters an optimizer may change.
    pub fn trainable_names(&self) -> Vec<&str> {
        self.iter().filter(|(_, p)| p.trainable).map(|(n, _)| n).collect()
    }

    pub fn trainable_size(&self) -> usize {
        self.iter().filter(|(_, p)| p.trainable).map(|(_, p)| p.trainable_size()).sum()
    }

    /// Weight and bias elements of every layer, frozen or not.
    pub fn param_count(&self) -> usize {
        self.iter().map(|(_, p)| p.trainable_size()).sum()
    }

    pub fn clear_grads(&mut self) {
        self.layers.values_mut().for_each(LayerParams::clear_grads);
    }
}

/// Dimensions of an image tensor as `(n, h, w, c)`.
pub(crate) fn nhwc(t: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match *t.shape() {
        [h, w, c] => Ok((1, h, w, c)),
        [n, h, w, c] => Ok((n, h, w, c)),
        _ => Err(Error::dim(format!(
            "expected an [H, W, C] or [N, H, W, C] tensor, got {:?}",
            t.shape()
        ))),
    }
}

/// Output shape matching the batching convention of `input`.
pub(crate) fn image_shape(input: &Tensor, n: usize, h: usize, w: usize, c: usize) -> Vec<usize> {
    if input.rank() == 3 {
        vec![h, w, c]
    } else {
        vec![n, h, w, c]
    }
}
