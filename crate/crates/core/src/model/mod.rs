//! Network graphs: layer specs, static shape checking, parameter storage,
//! freezing, execution and the on-disk artifact.
//!
//! A graph is a linear chain of [`LayerSpec`]s. Shapes in specs are
//! per-sample (`[H, W, C]` for feature maps, `[N]` for vectors); at run time
//! a leading batch axis is added.

mod arch;
mod artifact;
mod exec;

use std::collections::HashSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use arch::{attach_head, functional_v2, sequential_v1, vgg16_base, vgg16_transfer, ArchSpec, Architecture};
pub use artifact::{import_weights, load_model, read_artifact, save_model, write_artifact, FORMAT_VERSION, MAGIC};
pub use exec::{Seed, StepOutput, Tape};

pub use crate::ops::WeightStore;
use crate::error::{Error, Result};
use crate::ops::{conv_output_len, Activation, LayerParams, Padding, RunningStats};
use crate::tensor::Tensor;

pub const BATCHNORM_MOMENTUM: f32 = 0.99;
pub const BATCHNORM_EPSILON: f32 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerKind {
    Input,
    Conv2d {
        filters: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: Padding,
        activation: Option<Activation>,
        /// L2 penalty factor on the kernel.
        l2: Option<f32>,
    },
    MaxPool {
        pool: (usize, usize),
        stride: (usize, usize),
    },
    ZeroPad {
        pad: (usize, usize),
    },
    BatchNorm {
        momentum: f32,
        epsilon: f32,
    },
    Dropout {
        rate: f32,
    },
    Flatten,
    Reshape {
        shape: Vec<usize>,
    },
    Dense {
        units: usize,
        activation: Option<Activation>,
        l2: Option<f32>,
    },
    Activation {
        activation: Activation,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub layer: LayerKind,
    pub trainable: bool,
}

/// Shapes of a layer's weight and bias tensors, and whether it keeps running
/// statistics.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamShapes {
    pub weights: Vec<usize>,
    pub bias: Vec<usize>,
    pub running: bool,
}

impl ParamShapes {
    pub fn count(&self) -> usize {
        self.weights.iter().product::<usize>() + self.bias.iter().product::<usize>()
    }
}

impl LayerSpec {
    pub fn new(name: impl Into<String>, layer: LayerKind) -> Self {
        LayerSpec {
            name: name.into(),
            layer,
            trainable: true,
        }
    }

    pub fn conv(name: &str, filters: usize, kernel: usize, padding: Padding, activation: Activation) -> Self {
        Self::new(
            name,
            LayerKind::Conv2d {
                filters,
                kernel: (kernel, kernel),
                stride: (1, 1),
                padding,
                activation: Some(activation),
                l2: None,
            },
        )
    }

    pub fn maxpool(name: &str, size: usize) -> Self {
        Self::new(
            name,
            LayerKind::MaxPool {
                pool: (size, size),
                stride: (size, size),
            },
        )
    }

    pub fn dense(name: &str, units: usize, activation: Activation) -> Self {
        Self::new(
            name,
            LayerKind::Dense {
                units,
                activation: Some(activation),
                l2: None,
            },
        )
    }

    pub fn is_parametric(&self) -> bool {
        matches!(
            self.layer,
            LayerKind::Conv2d { .. } | LayerKind::Dense { .. } | LayerKind::BatchNorm { .. }
        )
    }

    pub fn l2(&self) -> Option<f32> {
        match self.layer {
            LayerKind::Conv2d { l2, .. } | LayerKind::Dense { l2, .. } => l2.filter(|&l| l > 0.0),
            _ => None,
        }
    }

    fn err(&self, msg: impl std::fmt::Display) -> Error {
        Error::dim(format!("layer `{}`: {msg}", self.name))
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let image = || -> Result<(usize, usize, usize)> {
            match *input {
                [h, w, c] => Ok((h, w, c)),
                _ => Err(self.err(format!("expects an [H, W, C] input, got {input:?}"))),
            }
        };
        match &self.layer {
            LayerKind::Input => Ok(input.to_vec()),
            &LayerKind::Conv2d {
                filters,
                kernel,
                stride,
                padding,
                ..
            } => {
                let (h, w, _) = image()?;
                let oh = conv_output_len(h, kernel.0, stride.0, padding);
                let ow = conv_output_len(w, kernel.1, stride.1, padding);
                match (oh, ow, filters) {
                    (Some((oh, _)), Some((ow, _)), f) if f > 0 => Ok(vec![oh, ow, f]),
                    _ => Err(self.err(format!("kernel {kernel:?} stride {stride:?} does not fit input {input:?}"))),
                }
            }
            &LayerKind::MaxPool { pool, stride } => {
                let (h, w, c) = image()?;
                if pool.0 == 0 || pool.1 == 0 || stride.0 == 0 || stride.1 == 0 || pool.0 > h || pool.1 > w {
                    return Err(self.err(format!("pool {pool:?} stride {stride:?} does not fit input {input:?}")));
                }
                Ok(vec![(h - pool.0) / stride.0 + 1, (w - pool.1) / stride.1 + 1, c])
            }
            &LayerKind::ZeroPad { pad } => {
                let (h, w, c) = image()?;
                Ok(vec![h + 2 * pad.0, w + 2 * pad.1, c])
            }
            LayerKind::BatchNorm { .. } | LayerKind::Activation { .. } => Ok(input.to_vec()),
            &LayerKind::Dropout { rate } => {
                crate::ops::Dropout::new(rate).map_err(|e| self.err(e))?;
                Ok(input.to_vec())
            }
            LayerKind::Flatten => Ok(vec![input.iter().product()]),
            LayerKind::Reshape { shape } => {
                if shape.is_empty() || shape.contains(&0) || shape.iter().product::<usize>() != input.iter().product::<usize>() {
                    return Err(self.err(format!("cannot reshape {input:?} to {shape:?}")));
                }
                Ok(shape.clone())
            }
            &LayerKind::Dense { units, .. } => match *input {
                [_] if units > 0 => Ok(vec![units]),
                _ => Err(self.err(format!("expects a flat input, got {input:?}"))),
            },
        }
    }

    /// Parameter tensor shapes given this layer's input shape.
    pub fn param_shapes(&self, input: &[usize]) -> Option<ParamShapes> {
        match self.layer {
            LayerKind::Conv2d { filters, kernel, .. } => Some(ParamShapes {
                weights: vec![kernel.0, kernel.1, *input.last()?, filters],
                bias: vec![filters],
                running: false,
            }),
            LayerKind::Dense { units, .. } => Some(ParamShapes {
                weights: vec![*input.first()?, units],
                bias: vec![units],
                running: false,
            }),
            LayerKind::BatchNorm { .. } => {
                let c = *input.last()?;
                Some(ParamShapes {
                    weights: vec![c],
                    bias: vec![c],
                    running: true,
                })
            }
            _ => None,
        }
    }
}

/// Per-sample output shape of every layer, checking names and shapes.
pub fn infer_shapes(input_shape: &[usize], layers: &[LayerSpec]) -> Result<Vec<Vec<usize>>> {
    if input_shape.is_empty() || input_shape.contains(&0) {
        return Err(Error::dim(format!("invalid input shape {input_shape:?}")));
    }
    let mut names = HashSet::new();
    let mut shape = input_shape.to_vec();
    let mut out = Vec::with_capacity(layers.len());
    for (i, spec) in layers.iter().enumerate() {
        if !names.insert(spec.name.as_str()) {
            return Err(Error::config(format!("duplicate layer name `{}`", spec.name)));
        }
        if matches!(spec.layer, LayerKind::Input) && i != 0 {
            return Err(Error::config(format!("input layer `{}` must come first", spec.name)));
        }
        shape = spec.output_shape(&shape)?;
        out.push(shape.clone());
    }
    Ok(out)
}

/// Input shape of each layer (the previous layer's output).
fn layer_inputs(input_shape: &[usize], shapes: &[Vec<usize>]) -> Vec<Vec<usize>> {
    std::iter::once(input_shape.to_vec())
        .chain(shapes.iter().cloned())
        .take(shapes.len())
        .collect()
}

/// Weight and bias element count of each parametric layer, without
/// allocating anything.
pub fn param_counts(input_shape: &[usize], layers: &[LayerSpec]) -> Result<Vec<(String, usize)>> {
    let shapes = infer_shapes(input_shape, layers)?;
    Ok(layers
        .iter()
        .zip(layer_inputs(input_shape, &shapes))
        .filter_map(|(spec, inp)| spec.param_shapes(&inp).map(|p| (spec.name.clone(), p.count())))
        .collect())
}

/// Which leading layers to mark non-trainable.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreezePolicy {
    #[default]
    None,
    /// The first `n` layers in graph order, counting the input layer.
    FirstN(usize),
    /// Every layer up to and including the named one.
    Through(String),
}

impl FreezePolicy {
    /// Freezes the VGG-16 base through its fourth block, leaving the last
    /// three convolutions and the head trainable.
    pub fn vgg_default() -> Self {
        FreezePolicy::Through("block4_pool".into())
    }
}

/// Glorot-uniform weights, zero bias; batch norm starts at gamma 1, beta 0,
/// mean 0, variance 1.
fn init_params(spec: &LayerSpec, shapes: &ParamShapes, rng: &mut impl Rng) -> LayerParams {
    let mut params = match spec.layer {
        LayerKind::BatchNorm { .. } => {
            let mut p = LayerParams::new(Tensor::full(shapes.weights.clone(), 1.0), Tensor::zeros(shapes.bias.clone()));
            p.running = Some(RunningStats {
                mean: Tensor::zeros(shapes.bias.clone()),
                var: Tensor::full(shapes.bias.clone(), 1.0),
            });
            p
        }
        _ => {
            let w = &shapes.weights;
            let (fan_in, fan_out) = match w.len() {
                4 => (w[0] * w[1] * w[2], w[0] * w[1] * w[3]),
                _ => (w[0], w[1]),
            };
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt() as f32;
            LayerParams::new(
                Tensor::uniform(w.clone(), -limit, limit, rng),
                Tensor::zeros(shapes.bias.clone()),
            )
        }
    };
    params.trainable = spec.trainable;
    params
}

/// A shape-checked layer chain together with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGraph {
    name: String,
    input_shape: Vec<usize>,
    layers: Vec<LayerSpec>,
    shapes: Vec<Vec<usize>>,
    weights: WeightStore,
}

impl ModelGraph {
    /// Build an architecture with freshly initialized parameters.
    pub fn init(arch: &ArchSpec, rng: &mut impl Rng) -> Result<Self> {
        let shapes = infer_shapes(&arch.input_shape, &arch.layers)?;
        let mut weights = WeightStore::new();
        for (spec, inp) in arch.layers.iter().zip(layer_inputs(&arch.input_shape, &shapes)) {
            if let Some(ps) = spec.param_shapes(&inp) {
                weights.insert(spec.name.clone(), init_params(spec, &ps, rng));
            }
        }
        Ok(ModelGraph {
            name: arch.name.clone(),
            input_shape: arch.input_shape.clone(),
            layers: arch.layers.clone(),
            shapes,
            weights,
        })
    }

    /// Assemble a graph from existing parameters. Every parametric layer
    /// needs an entry of the right shapes and there may be no others.
    /// Trainable flags are taken from the specs.
    pub fn from_parts(
        name: impl Into<String>,
        input_shape: Vec<usize>,
        layers: Vec<LayerSpec>,
        mut weights: WeightStore,
    ) -> Result<Self> {
        let shapes = infer_shapes(&input_shape, &layers)?;
        let mut expected = 0;
        for (spec, inp) in layers.iter().zip(layer_inputs(&input_shape, &shapes)) {
            let Some(ps) = spec.param_shapes(&inp) else {
                continue;
            };
            expected += 1;
            let p = weights
                .get_mut(&spec.name)
                .ok_or_else(|| Error::config(format!("no parameters for layer `{}`", spec.name)))?;
            check_param_shapes(&spec.name, p, &ps)?;
            p.trainable = spec.trainable;
        }
        if weights.len() != expected {
            let extra: Vec<&str> = weights
                .iter()
                .map(|(n, _)| n)
                .filter(|n| !layers.iter().any(|l| l.name == *n))
                .collect();
            return Err(Error::config(format!("parameters for unknown layers {extra:?}")));
        }
        Ok(ModelGraph {
            name: name.into(),
            input_shape,
            layers,
            shapes,
            weights,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn layer(&self, name: &str) -> Option<&LayerSpec> {
        self.layers.iter().find(|l| l.name == name)
    }

    /// Per-sample output shape of each layer.
    pub fn shapes(&self) -> &[Vec<usize>] {
        &self.shapes
    }

    pub fn output_shape(&self) -> &[usize] {
        self.shapes.last().map_or(&self.input_shape, Vec::as_slice)
    }

    pub fn weights(&self) -> &WeightStore {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut WeightStore {
        &mut self.weights
    }

    pub fn param_count(&self) -> usize {
        self.weights.param_count()
    }

    pub fn trainable_param_count(&self) -> usize {
        self.weights.trainable_size()
    }

    /// Parametric layers that an optimizer may update, in graph order.
    pub fn trainable_layers(&self) -> Vec<&str> {
        self.layers
            .iter()
            .filter(|l| l.is_parametric() && l.trainable)
            .map(|l| l.name.as_str())
            .collect()
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        let spec = self
            .layers
            .iter_mut()
            .find(|l| l.name == name)
            .ok_or_else(|| Error::config(format!("unknown layer `{name}`")))?;
        spec.trainable = trainable;
        if let Some(p) = self.weights.get_mut(name) {
            p.trainable = trainable;
            if !trainable {
                p.clear_grads();
            }
        }
        Ok(())
    }

    /// Mark the layers selected by `policy` non-trainable. Other flags are
    /// left alone.
    pub fn freeze(&mut self, policy: &FreezePolicy) -> Result<()> {
        let n = match policy {
            FreezePolicy::None => 0,
            &FreezePolicy::FirstN(n) => {
                if n > self.layers.len() {
                    return Err(Error::config(format!(
                        "cannot freeze the first {n} layers of a {}-layer graph",
                        self.layers.len()
                    )));
                }
                n
            }
            FreezePolicy::Through(name) => {
                self.layers
                    .iter()
                    .position(|l| &l.name == name)
                    .ok_or_else(|| Error::config(format!("unknown layer `{name}` in freeze policy")))?
                    + 1
            }
        };
        let names: Vec<String> = self.layers[..n].iter().map(|l| l.name.clone()).collect();
        for name in names {
            self.set_trainable(&name, false)?;
        }
        Ok(())
    }

    /// Append layers, initializing any new parameters.
    pub fn extend(&mut self, extra: Vec<LayerSpec>, rng: &mut impl Rng) -> Result<()> {
        let mut layers = self.layers.clone();
        layers.extend(extra);
        let shapes = infer_shapes(&self.input_shape, &layers)?;
        let inputs = layer_inputs(&self.input_shape, &shapes);
        for (i, spec) in layers.iter().enumerate().skip(self.layers.len()) {
            if let Some(ps) = spec.param_shapes(&inputs[i]) {
                self.weights.insert(spec.name.clone(), init_params(spec, &ps, rng));
            }
        }
        self.layers = layers;
        self.shapes = shapes;
        Ok(())
    }

    pub fn rename(&mut self, name: impl Into<String>) {
        self.name = name.into();
    }
}

fn check_param_shapes(name: &str, p: &LayerParams, ps: &ParamShapes) -> Result<()> {
    let running_ok = match (&p.running, ps.running) {
        (Some(r), true) => r.mean.shape() == ps.bias.as_slice() && r.var.shape() == ps.bias.as_slice(),
        (None, false) => true,
        _ => false,
    };
    if p.weights.shape() != ps.weights.as_slice() || p.bias.shape() != ps.bias.as_slice() || !running_ok {
        return Err(Error::dim(format!(
            "layer `{name}` parameters {:?}/{:?} do not match expected {:?}/{:?}",
            p.weights.shape(),
            p.bias.shape(),
            ps.weights,
            ps.bias
        )));
    }
    Ok(())
}
