//! Forward and reverse passes over a [`ModelGraph`].

use rand::Rng;

use super::{LayerKind, ModelGraph};
use crate::error::{Error, Result};
use crate::ops::{
    self, activation, activation_backward, batchnorm, batchnorm_backward, bce_sigmoid_logit_grad,
    binary_crossentropy, binary_crossentropy_grad, conv2d, conv2d_backward, conv2d_backward_input, dense,
    dense_backward, dropout, dropout_backward, maxpool2d, maxpool2d_backward, zero_pad2d, zero_pad2d_backward,
    Activation, Mode, RunningStats,
};
use crate::rng;
use crate::tensor::Tensor;

enum Aux {
    None,
    Mask(Option<Vec<f32>>),
    Norm {
        mode: Mode,
        mean: Vec<f32>,
        var: Vec<f32>,
        running: Option<RunningStats>,
    },
}

struct Entry {
    input: Tensor,
    aux: Aux,
}

/// What a training-mode forward pass recorded for the reverse pass.
#[derive(Default)]
pub struct Tape {
    entries: Vec<Entry>,
    output: Option<Tensor>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.output.is_none()
    }
}

/// Upstream gradient handed to [`ModelGraph::backward`].
pub enum Seed {
    /// Gradient with respect to the graph output.
    Output(Tensor),
    /// Gradient with respect to the logits of a final sigmoid layer; the
    /// sigmoid derivative is skipped.
    Logits(Tensor),
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutput {
    /// Cross-entropy plus L2 penalties.
    pub loss: f64,
    pub bce: f64,
    pub preds: Vec<f32>,
}

fn act_forward(y: Tensor, act: Option<Activation>) -> Tensor {
    match act {
        Some(a) => activation(&y, a),
        None => y,
    }
}

fn act_backward(y: &Tensor, act: Option<Activation>, dy: Tensor, skip: bool) -> Result<Tensor> {
    match act {
        Some(a) if !skip => activation_backward(y, a, &dy),
        _ => Ok(dy),
    }
}

impl ModelGraph {
    /// Add a batch axis when `input` is a single sample.
    fn batched(&self, input: &Tensor) -> Result<(Tensor, bool)> {
        let want = self.input_shape();
        if input.shape() == want {
            let mut shape = vec![1];
            shape.extend_from_slice(want);
            return Ok((input.reshape(shape)?, false));
        }
        if input.rank() == want.len() + 1 && &input.shape()[1..] == want {
            return Ok((input.clone(), true));
        }
        Err(Error::dim(format!(
            "graph `{}` expects input {want:?} or [N, ..], got {:?}",
            self.name(),
            input.shape()
        )))
    }

    fn unbatched(output: Tensor, batched: bool) -> Result<Tensor> {
        if batched {
            Ok(output)
        } else {
            let shape = output.shape()[1..].to_vec();
            output.into_reshaped(shape)
        }
    }

    fn layer_forward(&self, i: usize, x: &Tensor, mode: Mode, rng: &mut impl Rng) -> Result<(Tensor, Aux)> {
        let spec = &self.layers()[i];
        let params = || {
            self.weights()
                .get(&spec.name)
                .ok_or_else(|| Error::config(format!("no parameters for layer `{}`", spec.name)))
        };
        let n = x.shape()[0];
        Ok(match &spec.layer {
            LayerKind::Input => (x.clone(), Aux::None),
            &LayerKind::Conv2d {
                stride,
                padding,
                activation,
                ..
            } => (act_forward(conv2d(x, params()?, stride, padding)?, activation), Aux::None),
            &LayerKind::MaxPool { pool, stride } => (maxpool2d(x, pool, stride)?, Aux::None),
            &LayerKind::ZeroPad { pad } => (zero_pad2d(x, pad)?, Aux::None),
            &LayerKind::BatchNorm { momentum, epsilon } => {
                let p = params()?;
                // Frozen normalization layers always use their moving statistics.
                let mode = if p.trainable { mode } else { Mode::Infer };
                let out = batchnorm(x, p, mode, momentum, epsilon)?;
                let aux = Aux::Norm {
                    mode,
                    mean: out.mean,
                    var: out.var,
                    running: out.updated_running,
                };
                (out.output, aux)
            }
            &LayerKind::Dropout { rate } => {
                let (y, mask) = dropout(x, rate, mode, rng)?;
                (y, Aux::Mask(mask))
            }
            LayerKind::Flatten => (x.reshape([n, x.len() / n])?, Aux::None),
            LayerKind::Reshape { shape } => {
                let mut full = vec![n];
                full.extend_from_slice(shape);
                (x.reshape(full)?, Aux::None)
            }
            &LayerKind::Dense { activation, .. } => (act_forward(dense(x, params()?)?, activation), Aux::None),
            &LayerKind::Activation { activation: a } => (activation(x, a), Aux::None),
        })
    }

    fn with_layer_context<T>(&self, i: usize, r: Result<T>) -> Result<T> {
        r.map_err(|e| match e {
            Error::Dimension(m) => Error::Dimension(format!("layer `{}`: {m}", self.layers()[i].name)),
            other => other,
        })
    }

    fn run(&self, input: &Tensor, mode: Mode, rng: &mut impl Rng, mut tape: Option<&mut Tape>) -> Result<Tensor> {
        let (mut x, batched) = self.batched(input)?;
        if let Some(t) = tape.as_deref_mut() {
            t.entries.clear();
            t.output = None;
        }
        for i in 0..self.layers().len() {
            let (y, aux) = self.with_layer_context(i, self.layer_forward(i, &x, mode, rng))?;
            let prev = std::mem::replace(&mut x, y);
            if let Some(t) = tape.as_deref_mut() {
                t.entries.push(Entry { input: prev, aux });
            }
        }
        if let Some(t) = tape {
            t.output = Some(x.clone());
        }
        Self::unbatched(x, batched)
    }

    /// Run the graph. Accepts one sample or a batch with a leading axis;
    /// the output follows the same convention. Training mode draws dropout
    /// masks from `rng` and normalizes with batch statistics, but records
    /// nothing.
    pub fn forward(&self, input: &Tensor, mode: Mode, rng: &mut impl Rng) -> Result<Tensor> {
        self.run(input, mode, rng, None)
    }

    /// Inference-mode forward pass.
    pub fn predict(&self, input: &Tensor) -> Result<Tensor> {
        // Inference consumes no randomness.
        self.forward(input, Mode::Infer, &mut rng::seeded(0))
    }

    /// Training-mode forward pass recording into `tape`.
    pub fn forward_recorded(&self, input: &Tensor, rng: &mut impl Rng, tape: &mut Tape) -> Result<Tensor> {
        self.run(input, Mode::Train, rng, Some(tape))
    }

    pub fn ends_in_sigmoid(&self) -> bool {
        matches!(
            self.layers().last().map(|l| &l.layer),
            Some(LayerKind::Dense {
                activation: Some(Activation::Sigmoid),
                ..
            }) | Some(LayerKind::Conv2d {
                activation: Some(Activation::Sigmoid),
                ..
            }) | Some(LayerKind::Activation {
                activation: Activation::Sigmoid
            })
        )
    }

    /// Sum of the L2 penalties of every regularized layer.
    pub fn l2_penalty(&self) -> f64 {
        self.layers()
            .iter()
            .filter_map(|l| Some((self.weights().get(&l.name)?, l.l2()?)))
            .map(|(p, lambda)| ops::l2_penalty(p, lambda))
            .sum()
    }

    /// Reverse pass over the last recorded forward.
    ///
    /// Fills the gradient of every trainable weight and bias (including L2
    /// terms) and clears all others. Trainable batch-norm layers commit
    /// their updated moving statistics. The tape is consumed; a second call
    /// without a new forward fails with [`Error::NoForward`].
    pub fn backward(&mut self, tape: &mut Tape, seed: Seed) -> Result<()> {
        let Some(mut y) = tape.output.take() else {
            return Err(Error::NoForward);
        };
        let entries = std::mem::take(&mut tape.entries);
        let (dy, logits) = match seed {
            Seed::Output(t) => (t, false),
            Seed::Logits(t) => (t, true),
        };
        if logits && !self.ends_in_sigmoid() {
            return Err(Error::config("logit gradient given but the graph does not end in a sigmoid"));
        }
        if dy.len() != y.len() {
            return Err(Error::dim(format!(
                "upstream gradient {:?} does not match output {:?}",
                dy.shape(),
                y.shape()
            )));
        }
        let mut dy = dy.into_reshaped(y.shape().to_vec())?;
        self.weights_mut().clear_grads();
        let Some(stop) = self.layers().iter().position(|l| l.is_parametric() && l.trainable) else {
            return Ok(());
        };
        let last = self.layers().len() - 1;
        for (i, entry) in entries.into_iter().enumerate().rev() {
            if i < stop {
                break;
            }
            let x = entry.input;
            let result = self.layer_backward(i, &x, &y, dy, entry.aux, logits && i == last);
            dy = self.with_layer_context(i, result)?;
            y = x;
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn layer_backward(
        &mut self,
        i: usize,
        x: &Tensor,
        y: &Tensor,
        dy: Tensor,
        aux: Aux,
        skip_activation: bool,
    ) -> Result<Tensor> {
        let spec = self.layers()[i].clone();
        let name = spec.name.as_str();
        let l2 = spec.l2();
        let missing = || Error::config(format!("no parameters for layer `{name}`"));
        match spec.layer {
            LayerKind::Input => Ok(dy),
            LayerKind::Conv2d {
                stride,
                padding,
                activation,
                ..
            } => {
                let dz = act_backward(y, activation, dy, skip_activation)?;
                let p = self.weights_mut().get_mut(name).ok_or_else(missing)?;
                if !p.trainable {
                    return conv2d_backward_input(x, p, stride, padding, &dz);
                }
                let g = conv2d_backward(x, p, stride, padding, &dz)?;
                p.weights.set_grad(g.weights.into_data())?;
                p.bias.set_grad(g.bias.into_data())?;
                if let Some(lambda) = l2 {
                    ops::l2_accumulate_grad(p, lambda);
                }
                Ok(g.input)
            }
            LayerKind::Dense { activation, .. } => {
                let dz = act_backward(y, activation, dy, skip_activation)?;
                let p = self.weights_mut().get_mut(name).ok_or_else(missing)?;
                let g = dense_backward(x, p, &dz)?;
                if p.trainable {
                    p.weights.set_grad(g.weights.into_data())?;
                    p.bias.set_grad(g.bias.into_data())?;
                    if let Some(lambda) = l2 {
                        ops::l2_accumulate_grad(p, lambda);
                    }
                }
                Ok(g.input)
            }
            LayerKind::BatchNorm { epsilon, .. } => {
                let Aux::Norm {
                    mode,
                    mean,
                    var,
                    running,
                } = aux
                else {
                    return Err(Error::NoForward);
                };
                let p = self.weights_mut().get_mut(name).ok_or_else(missing)?;
                let g = batchnorm_backward(x, p, mode, &mean, &var, epsilon, &dy)?;
                if p.trainable {
                    p.weights.set_grad(g.gamma.into_data())?;
                    p.bias.set_grad(g.beta.into_data())?;
                    if running.is_some() {
                        p.running = running;
                    }
                }
                Ok(g.input)
            }
            LayerKind::MaxPool { pool, stride } => maxpool2d_backward(x, pool, stride, &dy),
            LayerKind::ZeroPad { pad } => zero_pad2d_backward(x, pad, &dy),
            LayerKind::Dropout { .. } => match aux {
                Aux::Mask(mask) => dropout_backward(mask.as_deref(), &dy),
                _ => Err(Error::NoForward),
            },
            LayerKind::Flatten | LayerKind::Reshape { .. } => dy.into_reshaped(x.shape().to_vec()),
            LayerKind::Activation { activation: a } => {
                if skip_activation {
                    Ok(dy)
                } else {
                    activation_backward(y, a, &dy)
                }
            }
        }
    }

    /// Forward, binary cross-entropy against `labels`, and backward. When the
    /// graph ends in a sigmoid the loss gradient is taken at the logits.
    pub fn loss_and_backward(&mut self, input: &Tensor, labels: &[f32], rng: &mut impl Rng) -> Result<StepOutput> {
        let mut tape = Tape::new();
        let out = self.forward_recorded(input, rng, &mut tape)?;
        let preds = out.data().to_vec();
        let bce = binary_crossentropy(&preds, labels)? as f64;
        let loss = bce + self.l2_penalty();
        let seed = if self.ends_in_sigmoid() {
            Seed::Logits(Tensor::new(out.shape().to_vec(), bce_sigmoid_logit_grad(&preds, labels)?)?)
        } else {
            Seed::Output(Tensor::new(out.shape().to_vec(), binary_crossentropy_grad(&preds, labels)?)?)
        };
        self.backward(&mut tape, seed)?;
        Ok(StepOutput { loss, bce, preds })
    }
}
