//! Finite-difference checks for every layer kind, shared by the gradient
//! tests and the acceptance run.
//!
//! Each check uses the scalar `L = sum(r * y)` for a fixed random `r`, so the
//! upstream gradient is `r`. Central differences use `h = 1e-3`; the
//! analytic and numeric gradients of each tensor must agree to a relative
//! error `|a - n| / max(|a|, |n|) <= 1e-3` in the Euclidean norm.

use rand::Rng;

use fundus::model::{ArchSpec, LayerKind, LayerSpec, ModelGraph, Seed, Tape};
use fundus::ops::{
    activation, activation_backward, batchnorm, batchnorm_backward, bce_sigmoid_logit_grad, binary_crossentropy,
    binary_crossentropy_grad, conv2d, conv2d_backward, dense, dense_backward, dropout, dropout_backward,
    l2_accumulate_grad, l2_penalty, maxpool2d, maxpool2d_backward, zero_pad2d, zero_pad2d_backward, Activation,
    LayerParams, Mode, Padding, RunningStats,
};
use fundus::{rng, Tensor};

pub const H: f32 = 1e-3;
pub const REL_TOL: f64 = 1e-3;
pub const INSTANCES: u64 = 5;
/// Step for the whole-graph check. Six f32 layers leave about 1e-7 of
/// rounding in the output, which at `h = 1e-3` is the same order as the
/// signal for early-layer parameters; the per-kind checks above use `H`.
const GRAPH_H: f32 = 1e-2;

fn weighted_sum(y: &Tensor, r: &Tensor) -> f64 {
    y.data().iter().zip(r.data()).map(|(&a, &b)| a as f64 * b as f64).sum()
}

/// Central difference of `f` with respect to every element of `x`.
fn numeric(x: &[f32], f: impl FnMut(&[f32]) -> f64) -> Vec<f64> {
    numeric_with_step(x, H, f)
}

fn numeric_with_step(x: &[f32], h: f32, mut f: impl FnMut(&[f32]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let (plus, minus) = (x[i] + h, x[i] - h);
            probe[i] = plus;
            let lp = f(&probe);
            probe[i] = minus;
            let lm = f(&probe);
            probe[i] = x[i];
            (lp - lm) / (plus as f64 - minus as f64)
        })
        .collect()
}

fn assert_close(what: &str, analytic: &[f32], numeric: &[f64]) {
    assert_eq!(analytic.len(), numeric.len(), "{what}: length");
    let diff: f64 = analytic.iter().zip(numeric).map(|(&a, &n)| (a as f64 - n).powi(2)).sum::<f64>().sqrt();
    let na: f64 = analytic.iter().map(|&a| (a as f64).powi(2)).sum::<f64>().sqrt();
    let nn: f64 = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    let scale = na.max(nn);
    assert!(scale > 0.0, "{what}: gradient is identically zero");
    let rel = diff / scale;
    assert!(rel <= REL_TOL, "{what}: relative error {rel:.3e} (analytic norm {na:.4e}, numeric norm {nn:.4e})");
}

/// Uniform in `[-1, 1]` with `|x| >= 0.05`, clear of the ReLU kink.
fn away_from_zero(shape: &[usize], r: &mut impl Rng) -> Tensor {
    Tensor::uniform(shape.to_vec(), -1.0, 1.0, r).map(|x| if x.abs() < 0.05 { x + 0.1f32.copysign(x) } else { x })
}

/// A shuffled grid of distinct values 0.01 apart, so no pooling window has
/// a near tie.
fn distinct(shape: &[usize], r: &mut impl Rng) -> Tensor {
    use rand::seq::SliceRandom;
    let n: usize = shape.iter().product();
    let mut v: Vec<f32> = (0..n).map(|i| (i as f32 - n as f32 / 2.0) * 0.01).collect();
    v.shuffle(r);
    Tensor::new(shape.to_vec(), v).unwrap()
}

fn with_data(shape: &[usize], data: &[f32]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

pub fn conv2d_gradients() {
    for seed in 0..INSTANCES {
        let mut r = rng::seeded(100 + seed);
        let (n, h, w) = (r.random_range(1..=2), r.random_range(4..=6), r.random_range(4..=6));
        let (cin, cout) = (r.random_range(1..=3), r.random_range(1..=3));
        let k = r.random_range(1..=3);
        let stride = (r.random_range(1..=2), r.random_range(1..=2));
        let padding = if seed % 2 == 0 { Padding::Same } else { Padding::Valid };
        let x = Tensor::uniform([n, h, w, cin], -1.0, 1.0, &mut r);
        let wt = Tensor::uniform([k, k, cin, cout], -1.0, 1.0, &mut r);
        let b = Tensor::uniform([cout], -1.0, 1.0, &mut r);
        let params = LayerParams::new(wt.clone(), b.clone());
        let y = conv2d(&x, &params, stride, padding).unwrap();
        let rr = Tensor::uniform(y.shape().to_vec(), -1.0, 1.0, &mut r);
        let g = conv2d_backward(&x, &params, stride, padding, &rr).unwrap();
        let tag = format!("conv2d #{seed} k={k} stride={stride:?} {padding:?}");

        let nx = numeric(x.data(), |d| weighted_sum(&conv2d(&with_data(x.shape(), d), &params, stride, padding).unwrap(), &rr));
        assert_close(&format!("{tag} input"), g.input.data(), &nx);
        let nw = numeric(wt.data(), |d| {
            let p = LayerParams::new(with_data(wt.shape(), d), b.clone());
            weighted_sum(&conv2d(&x, &p, stride, padding).unwrap(), &rr)
        });
        assert_close(&format!("{tag} weights"), g.weights.data(), &nw);
        let nb = numeric(b.data(), |d| {
            let p = LayerParams::new(wt.clone(), with_data(b.shape(), d));
            weighted_sum(&conv2d(&x, &p, stride, padding).unwrap(), &rr)
        });
        assert_close(&format!("{tag} bias"), g.bias.data(), &nb);
    }
}

pub fn dense_gradients() {
    for seed in 0..INSTANCES {
        let mut r = rng::seeded(200 + seed);
        let (n, din, dout) = (r.random_range(1..=3), r.random_range(2..=6), r.random_range(1..=4));
        let x = Tensor::uniform([n, din], -1.0, 1.0, &mut r);
        let wt = Tensor::uniform([din, dout], -1.0, 1.0, &mut r);
        let b = Tensor::uniform([dout], -1.0, 1.0, &mut r);
        let params = LayerParams::new(wt.clone(), b.clone());
        let y = dense(&x, &params).unwrap();
        let rr = Tensor::uniform(y.shape().to_vec(), -1.0, 1.0, &mut r);
        let g = dense_backward(&x, &params, &rr).unwrap();

        let nx = numeric(x.data(), |d| weighted_sum(&dense(&with_data(x.shape(), d), &params).unwrap(), &rr));
        assert_close(&format!("dense #{seed} input"), g.input.data(), &nx);
        let nw = numeric(wt.data(), |d| {
            weighted_sum(&dense(&x, &LayerParams::new(with_data(wt.shape(), d), b.clone())).unwrap(), &rr)
        });
        assert_close(&format!("dense #{seed} weights"), g.weights.data(), &nw);
        let nb = numeric(b.data(), |d| {
            weighted_sum(&dense(&x, &LayerParams::new(wt.clone(), with_data(b.shape(), d))).unwrap(), &rr)
        });
        assert_close(&format!("dense #{seed} bias"), g.bias.data(), &nb);
    }
}

pub fn maxpool_gradients() {
    let configs = [((2, 2), (2, 2)), ((2, 2), (1, 1)), ((1, 1), (1, 1)), ((3, 3), (2, 2)), ((2, 2), (2, 2))];
    for (seed, &(pool, stride)) in configs.iter().enumerate() {
        let mut r = rng::seeded(300 + seed as u64);
        let shape = [r.random_range(1..=2), r.random_range(4..=7), r.random_range(4..=7), r.random_range(1..=3)];
        let x = distinct(&shape, &mut r);
        let y = maxpool2d(&x, pool, stride).unwrap();
        let rr = Tensor::uniform(y.shape().to_vec(), -1.0, 1.0, &mut r);
        let dx = maxpool2d_backward(&x, pool, stride, &rr).unwrap();
        let nx = numeric(x.data(), |d| weighted_sum(&maxpool2d(&with_data(&shape, d), pool, stride).unwrap(), &rr));
        assert_close(&format!("maxpool #{seed} pool={pool:?} stride={stride:?}"), dx.data(), &nx);
    }
}

pub fn zero_pad_gradients() {
    for seed in 0..INSTANCES {
        let mut r = rng::seeded(400 + seed);
        let shape = [r.random_range(1..=2), r.random_range(2..=5), r.random_range(2..=5), r.random_range(1..=3)];
        let pad = (r.random_range(0..=2), r.random_range(0..=2));
        let x = Tensor::uniform(shape, -1.0, 1.0, &mut r);
        let y = zero_pad2d(&x, pad).unwrap();
        let rr = Tensor::uniform(y.shape().to_vec(), -1.0, 1.0, &mut r);
        let dx = zero_pad2d_backward(&x, pad, &rr).unwrap();
        let nx = numeric(x.data(), |d| weighted_sum(&zero_pad2d(&with_data(&shape, d), pad).unwrap(), &rr));
        assert_close(&format!("zero_pad #{seed} pad={pad:?}"), dx.data(), &nx);
    }
}

fn bn_params(gamma: &Tensor, beta: &Tensor, r: &mut impl Rng) -> LayerParams {
    let c = gamma.len();
    let mut p = LayerParams::new(gamma.clone(), beta.clone());
    p.running = Some(RunningStats {
        mean: Tensor::uniform([c], -0.5, 0.5, r),
        var: Tensor::uniform([c], 0.5, 1.5, r),
    });
    p
}

pub fn batchnorm_gradients() {
    const MOMENTUM: f32 = 0.99;
    const EPS: f32 = 1e-3;
    for seed in 0..INSTANCES {
        for mode in [Mode::Train, Mode::Infer] {
            let mut r = rng::seeded(500 + seed);
            let c = r.random_range(1..=3);
            let shape = [r.random_range(2..=3), r.random_range(2..=3), r.random_range(2..=3), c];
            let x = Tensor::uniform(shape, -2.0, 2.0, &mut r);
            let gamma = Tensor::uniform([c], 0.5, 1.5, &mut r);
            let beta = Tensor::uniform([c], -0.5, 0.5, &mut r);
            let params = bn_params(&gamma, &beta, &mut r);
            let out = batchnorm(&x, &params, mode, MOMENTUM, EPS).unwrap();
            let rr = Tensor::uniform(shape, -1.0, 1.0, &mut r);
            let g = batchnorm_backward(&x, &params, mode, &out.mean, &out.var, EPS, &rr).unwrap();
            let loss = |x: &Tensor, p: &LayerParams| weighted_sum(&batchnorm(x, p, mode, MOMENTUM, EPS).unwrap().output, &rr);
            let tag = format!("batchnorm #{seed} {mode:?}");

            let nx = numeric(x.data(), |d| loss(&with_data(&shape, d), &params));
            assert_close(&format!("{tag} input"), g.input.data(), &nx);
            let ng = numeric(gamma.data(), |d| {
                let mut p = params.clone();
                p.weights = with_data(&[c], d);
                loss(&x, &p)
            });
            assert_close(&format!("{tag} gamma"), g.gamma.data(), &ng);
            let nb = numeric(beta.data(), |d| {
                let mut p = params.clone();
                p.bias = with_data(&[c], d);
                loss(&x, &p)
            });
            assert_close(&format!("{tag} beta"), g.beta.data(), &nb);
        }
    }
}

pub fn activation_gradients() {
    for kind in [Activation::Relu, Activation::Tanh, Activation::Sigmoid] {
        for seed in 0..INSTANCES {
            let mut r = rng::seeded(600 + seed);
            let shape = [r.random_range(1..=3), r.random_range(1..=4), r.random_range(1..=4), 2];
            let x = away_from_zero(&shape, &mut r).map(|v| v * 2.0);
            let y = activation(&x, kind);
            let rr = Tensor::uniform(shape, -1.0, 1.0, &mut r);
            let dx = activation_backward(&y, kind, &rr).unwrap();
            let nx = numeric(x.data(), |d| weighted_sum(&activation(&with_data(&shape, d), kind), &rr));
            assert_close(&format!("{kind:?} #{seed}"), dx.data(), &nx);
        }
    }
}

pub fn dropout_gradients() {
    for seed in 0..INSTANCES {
        let mut r = rng::seeded(700 + seed);
        let rate = [0.3, 0.5, 0.6, 0.1, 0.8][seed as usize];
        let shape = [2, r.random_range(2..=4), r.random_range(2..=4), 3];
        let x = Tensor::uniform(shape, -1.0, 1.0, &mut r);
        let rr = Tensor::uniform(shape, -1.0, 1.0, &mut r);
        let mask_seed = 7000 + seed;
        let (_, mask) = dropout(&x, rate, Mode::Train, &mut rng::seeded(mask_seed)).unwrap();
        let dx = dropout_backward(mask.as_deref(), &rr).unwrap();
        let nx = numeric(x.data(), |d| {
            let (y, _) = dropout(&with_data(&shape, d), rate, Mode::Train, &mut rng::seeded(mask_seed)).unwrap();
            weighted_sum(&y, &rr)
        });
        assert_close(&format!("dropout #{seed} rate={rate}"), dx.data(), &nx);
    }
}

/// Mean cross-entropy in f64, clamped like the library.
fn bce_f64(p: &[f64], y: &[f32]) -> f64 {
    let eps = 1e-7;
    let n = p.len() as f64;
    p.iter()
        .zip(y)
        .map(|(&p, &y)| {
            let p = p.clamp(eps, 1.0 - eps);
            -(y as f64 * p.ln() + (1.0 - y as f64) * (1.0 - p).ln())
        })
        .sum::<f64>()
        / n
}

pub fn crossentropy_gradients() {
    for seed in 0..INSTANCES {
        let mut r = rng::seeded(800 + seed);
        let n = r.random_range(1..=8);
        let p: Vec<f32> = (0..n).map(|_| r.random_range(0.05..0.95)).collect();
        let y: Vec<f32> = (0..n).map(|_| r.random_range(0..2) as f32).collect();
        let p64: Vec<f64> = p.iter().map(|&v| v as f64).collect();
        assert!((binary_crossentropy(&p, &y).unwrap() as f64 - bce_f64(&p64, &y)).abs() < 1e-6);
        let g = binary_crossentropy_grad(&p, &y).unwrap();
        let np = numeric(&p, |d| bce_f64(&d.iter().map(|&v| v as f64).collect::<Vec<_>>(), &y));
        assert_close(&format!("bce #{seed}"), &g, &np);

        let z: Vec<f32> = (0..n).map(|_| r.random_range(-4.0..4.0)).collect();
        let sig = |z: f64| 1.0 / (1.0 + (-z).exp());
        let preds: Vec<f32> = z.iter().map(|&v| sig(v as f64) as f32).collect();
        let gz = bce_sigmoid_logit_grad(&preds, &y).unwrap();
        let nz = numeric(&z, |d| bce_f64(&d.iter().map(|&v| sig(v as f64)).collect::<Vec<_>>(), &y));
        assert_close(&format!("sigmoid+bce #{seed}"), &gz, &nz);
    }
}

pub fn l2_gradients() {
    for seed in 0..INSTANCES {
        let mut r = rng::seeded(900 + seed);
        let shape = [r.random_range(1..=3), r.random_range(1..=3), 2, 2];
        let lambda = [0.01, 0.1, 0.001, 0.5, 0.02][seed as usize];
        let w = Tensor::uniform(shape, -1.0, 1.0, &mut r);
        let mut p = LayerParams::new(w.clone(), Tensor::zeros([2]));
        l2_accumulate_grad(&mut p, lambda);
        let nw = numeric(w.data(), |d| l2_penalty(&LayerParams::new(with_data(&shape, d), Tensor::zeros([2])), lambda));
        assert_close(&format!("l2 #{seed}"), p.weights.grad().unwrap(), &nw);
    }
}

/// A small graph touching every layer kind the executor routes, ending in a
/// linear unit so the upstream gradient is exact. Batch norm sits first:
/// placed after a convolution it would cancel most of that bias gradient.
fn small_graph(seed: u64) -> ModelGraph {
    let conv = |name: &str, filters, k, padding, l2| {
        LayerSpec::new(
            name,
            LayerKind::Conv2d {
                filters,
                kernel: (k, k),
                stride: (1, 1),
                padding,
                activation: Some(Activation::Tanh),
                l2,
            },
        )
    };
    let layers = vec![
        LayerSpec::new("in", LayerKind::Input),
        LayerSpec::new("bn", LayerKind::BatchNorm { momentum: 0.99, epsilon: 1e-3 }),
        conv("c1", 3, 3, Padding::Same, Some(0.01)),
        LayerSpec::new("pad", LayerKind::ZeroPad { pad: (1, 1) }),
        LayerSpec::new("drop", LayerKind::Dropout { rate: 0.3 }),
        conv("c2", 2, 2, Padding::Valid, None),
        LayerSpec::new("flat", LayerKind::Flatten),
        LayerSpec::new(
            "d1",
            LayerKind::Dense {
                units: 4,
                activation: Some(Activation::Sigmoid),
                l2: Some(0.05),
            },
        ),
        LayerSpec::new("re", LayerKind::Reshape { shape: vec![2, 2] }),
        LayerSpec::new("flat2", LayerKind::Flatten),
        LayerSpec::new("act", LayerKind::Activation { activation: Activation::Tanh }),
        LayerSpec::new(
            "out",
            LayerKind::Dense {
                units: 2,
                activation: None,
                l2: None,
            },
        ),
    ];
    let spec = ArchSpec {
        name: "grad-check".into(),
        input_shape: vec![5, 5, 2],
        layers,
        lint: Vec::new(),
    };
    ModelGraph::init(&spec, &mut rng::seeded(seed)).unwrap()
}

pub fn graph_gradients_include_l2() {
    for seed in 0..INSTANCES {
        let mut graph = small_graph(1000 + seed);
        let mut r = rng::seeded(1100 + seed);
        let x = Tensor::uniform([2, 5, 5, 2], -1.0, 1.0, &mut r);
        let rr = Tensor::uniform([2, 2], -1.0, 1.0, &mut r);
        let drop_seed = 1200 + seed;
        let loss = |g: &ModelGraph| {
            let y = g.forward(&x, Mode::Train, &mut rng::seeded(drop_seed)).unwrap();
            weighted_sum(&y, &rr) + g.l2_penalty()
        };
        let mut tape = Tape::new();
        graph.forward_recorded(&x, &mut rng::seeded(drop_seed), &mut tape).unwrap();
        let probe = graph.clone();
        graph.backward(&mut tape, Seed::Output(rr.clone())).unwrap();

        for name in ["c1", "bn", "c2", "d1", "out"] {
            let layer = graph.weights().get(name).unwrap();
            for (part, analytic) in [("weights", layer.weights.grad().unwrap()), ("bias", layer.bias.grad().unwrap())] {
                let base = probe.weights().get(name).unwrap();
                let values = if part == "weights" { &base.weights } else { &base.bias };
                let numeric_grad = numeric_with_step(values.data(), GRAPH_H, |d| {
                    let mut g = probe.clone();
                    let p = g.weights_mut().get_mut(name).unwrap();
                    let t = if part == "weights" { &mut p.weights } else { &mut p.bias };
                    t.data_mut().copy_from_slice(d);
                    loss(&g)
                });
                assert_close(&format!("graph #{seed} {name}/{part}"), analytic, &numeric_grad);
            }
        }
    }
}


/// Every check, named by layer kind.
pub const CHECKS: &[(&str, fn())] = &[
    ("conv2d_gradients", conv2d_gradients),
    ("dense_gradients", dense_gradients),
    ("maxpool_gradients", maxpool_gradients),
    ("zero_pad_gradients", zero_pad_gradients),
    ("batchnorm_gradients", batchnorm_gradients),
    ("activation_gradients", activation_gradients),
    ("dropout_gradients", dropout_gradients),
    ("crossentropy_gradients", crossentropy_gradients),
    ("l2_gradients", l2_gradients),
    ("graph_gradients_include_l2", graph_gradients_include_l2),
];
