//! Built-in architectures.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{infer_shapes, FreezePolicy, LayerKind, LayerSpec, ModelGraph, BATCHNORM_EPSILON, BATCHNORM_MOMENTUM};
use crate::error::{Error, Result};
use crate::ops::{Activation, Padding};

/// An architecture before parameters exist.
#[derive(Clone, Debug, PartialEq)]
pub struct ArchSpec {
    pub name: String,
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    /// Oddities of the construction worth surfacing to the user.
    pub lint: Vec<String>,
}

impl ArchSpec {
    pub fn shapes(&self) -> Result<Vec<Vec<usize>>> {
        infer_shapes(&self.input_shape, &self.layers)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Architecture {
    Vgg16Transfer,
    SequentialV1,
    FunctionalV2,
}

impl Architecture {
    /// Square input side the architecture was designed for.
    pub fn default_input_size(self) -> usize {
        match self {
            Architecture::Vgg16Transfer => 224,
            Architecture::SequentialV1 => 605,
            Architecture::FunctionalV2 => 256,
        }
    }

    pub fn spec(self, height: usize, width: usize) -> Result<ArchSpec> {
        let shape = [height, width, 3];
        match self {
            Architecture::Vgg16Transfer => attach_head(vgg16_base(shape)),
            Architecture::SequentialV1 => Ok(sequential_v1(shape)),
            Architecture::FunctionalV2 => Ok(functional_v2(shape)),
        }
    }

    pub fn default_freeze(self) -> FreezePolicy {
        match self {
            Architecture::Vgg16Transfer => FreezePolicy::vgg_default(),
            _ => FreezePolicy::None,
        }
    }
}

pub const VGG_BLOCKS: [(usize, usize); 5] = [(2, 64), (2, 128), (3, 256), (3, 512), (3, 512)];

/// The VGG-16 convolutional base: five blocks of 3x3 same-padded ReLU
/// convolutions, each closed by a 2x2 stride-2 max pool.
pub fn vgg16_base(input_shape: [usize; 3]) -> ArchSpec {
    let mut layers = vec![LayerSpec::new("input", LayerKind::Input)];
    for (b, &(convs, filters)) in VGG_BLOCKS.iter().enumerate() {
        let b = b + 1;
        for i in 1..=convs {
            layers.push(LayerSpec::conv(
                &format!("block{b}_conv{i}"),
                filters,
                3,
                Padding::Same,
                Activation::Relu,
            ));
        }
        layers.push(LayerSpec::maxpool(&format!("block{b}_pool"), 2));
    }
    ArchSpec {
        name: "vgg16-base".into(),
        input_shape: input_shape.to_vec(),
        layers,
        lint: vec![],
    }
}

/// Dropout(0.6), flatten by reshape, dropout(0.6), one sigmoid unit.
fn head_layers(features: usize) -> Vec<LayerSpec> {
    vec![
        LayerSpec::new("head_dropout_1", LayerKind::Dropout { rate: 0.6 }),
        LayerSpec::new("head_reshape", LayerKind::Reshape { shape: vec![features] }),
        LayerSpec::new("head_dropout_2", LayerKind::Dropout { rate: 0.6 }),
        LayerSpec::dense("head_dense", 1, Activation::Sigmoid),
    ]
}

fn head_features(input_shape: &[usize], layers: &[LayerSpec]) -> Result<usize> {
    let shapes = infer_shapes(input_shape, layers)?;
    match shapes.last().map(Vec::as_slice) {
        Some(&[h, w, c]) => Ok(h * w * c),
        other => Err(Error::dim(format!(
            "classification head needs an [H, W, C] feature map, base ends in {other:?}"
        ))),
    }
}

/// Append the binary classification head to a convolutional base.
pub fn attach_head(mut base: ArchSpec) -> Result<ArchSpec> {
    let features = head_features(&base.input_shape, &base.layers)?;
    base.layers.extend(head_layers(features));
    base.name = "vgg16-transfer".into();
    Ok(base)
}

impl ModelGraph {
    /// Append the classification head, initializing its dense layer.
    pub fn attach_head(&mut self, rng: &mut impl Rng) -> Result<()> {
        let features = head_features(self.input_shape(), self.layers())?;
        self.extend(head_layers(features), rng)?;
        self.rename("vgg16-transfer");
        Ok(())
    }
}

/// VGG-16 base plus head, optionally loading base weights from an artifact
/// file, then frozen by `freeze`.
pub fn vgg16_transfer(
    input_size: usize,
    pretrained: Option<&Path>,
    freeze: &FreezePolicy,
    rng: &mut impl Rng,
) -> Result<ModelGraph> {
    let mut graph = ModelGraph::init(&vgg16_base([input_size, input_size, 3]), rng)?;
    if let Some(path) = pretrained {
        super::import_weights(&mut graph, path)?;
    }
    graph.attach_head(rng)?;
    graph.freeze(freeze)?;
    Ok(graph)
}

/// One tanh convolution, a pool and two dense layers.
pub fn sequential_v1(input_shape: [usize; 3]) -> ArchSpec {
    ArchSpec {
        name: "sequential-v1".into(),
        input_shape: input_shape.to_vec(),
        layers: vec![
            LayerSpec::new("input", LayerKind::Input),
            LayerSpec::conv("conv", 64, 3, Padding::Same, Activation::Tanh),
            LayerSpec::maxpool("pool", 2),
            LayerSpec::new("flatten", LayerKind::Flatten),
            LayerSpec::dense("dense", 32, Activation::Tanh),
            LayerSpec::dense("output", 1, Activation::Sigmoid),
        ],
        lint: vec![],
    }
}

fn batchnorm(name: &str) -> LayerSpec {
    LayerSpec::new(
        name,
        LayerKind::BatchNorm {
            momentum: BATCHNORM_MOMENTUM,
            epsilon: BATCHNORM_EPSILON,
        },
    )
}

fn regularized(mut spec: LayerSpec, lambda: f32) -> LayerSpec {
    if let LayerKind::Conv2d { l2, .. } = &mut spec.layer {
        *l2 = Some(lambda);
    }
    spec
}

/// The functional model, following its dataflow: two of the three
/// dropout assignments named `drop1` feed nothing and are left out.
pub fn functional_v2(input_shape: [usize; 3]) -> ArchSpec {
    use Activation::Relu;
    use Padding::Valid;
    let layers = vec![
        LayerSpec::new("visible", LayerKind::Input),
        LayerSpec::conv("conv1", 16, 3, Valid, Relu),
        LayerSpec::conv("conv2", 32, 3, Valid, Relu),
        batchnorm("bat1"),
        LayerSpec::new("conv3", LayerKind::ZeroPad { pad: (1, 1) }),
        LayerSpec::maxpool("pool1", 2),
        LayerSpec::new("drop1", LayerKind::Dropout { rate: 0.3 }),
        regularized(LayerSpec::conv("conv4", 32, 3, Valid, Relu), 0.01),
        regularized(LayerSpec::conv("conv5", 64, 3, Valid, Relu), 0.01),
        batchnorm("bat2"),
        LayerSpec::maxpool("pool2", 1),
        regularized(LayerSpec::conv("conv6", 128, 3, Valid, Relu), 0.01),
        LayerSpec::conv("conv7", 128, 2, Valid, Relu),
        batchnorm("bat3"),
        LayerSpec::maxpool("pool3", 1),
        LayerSpec::new("flat", LayerKind::Flatten),
        LayerSpec::new("drop4", LayerKind::Dropout { rate: 0.5 }),
        LayerSpec::dense("output", 1, Activation::Sigmoid),
    ];
    let lint = vec![
        "dropout assigned to `drop1` after `pool2` is never consumed and was omitted".to_string(),
        "dropout assigned to `drop1` after `pool3` is never consumed and was omitted".to_string(),
        "`pool2` and `pool3` use 1x1 windows and are identity operations".to_string(),
    ];
    ArchSpec {
        name: "functional-v2".into(),
        input_shape: input_shape.to_vec(),
        layers,
        lint,
    }
}
