use super::LayerParams;
use crate::error::{Error, Result};

/// Predictions are clamped to `[BCE_EPSILON, 1 - BCE_EPSILON]` before logs.
pub const BCE_EPSILON: f32 = 1e-7;

pub fn clamp_prob(p: f32) -> f32 {
    p.clamp(BCE_EPSILON, 1.0 - BCE_EPSILON)
}

fn check(preds: &[f32], labels: &[f32]) -> Result<()> {
    if preds.len() != labels.len() || preds.is_empty() {
        return Err(Error::dim(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    Ok(())
}

/// Mean binary cross-entropy over a batch.
pub fn binary_crossentropy(preds: &[f32], labels: &[f32]) -> Result<f32> {
    check(preds, labels)?;
    let total: f64 = preds
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = clamp_prob(p) as f64;
            let y = y as f64;
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum();
    Ok((total / preds.len() as f64) as f32)
}

/// Gradient of the mean loss with respect to each prediction.
pub fn binary_crossentropy_grad(preds: &[f32], labels: &[f32]) -> Result<Vec<f32>> {
    check(preds, labels)?;
    let n = preds.len() as f64;
    Ok(preds
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = clamp_prob(p) as f64;
            ((p - y as f64) / (p * (1.0 - p)) / n) as f32
        })
        .collect())
}

/// Gradient of the mean loss with respect to the logits feeding a sigmoid,
/// `(p - y) / n`. Stays informative when the sigmoid saturates on the wrong
/// side. A prediction within `BCE_EPSILON` of its label sits where the
/// clamped loss is flat and gets exactly zero; the raw `p - y` there can be
/// as small as 1e-30 and would fill the backward pass with subnormals.
pub fn bce_sigmoid_logit_grad(preds: &[f32], labels: &[f32]) -> Result<Vec<f32>> {
    check(preds, labels)?;
    let n = preds.len() as f32;
    Ok(preds
        .iter()
        .zip(labels)
        .map(|(&p, &y)| if (p - y).abs() < BCE_EPSILON { 0.0 } else { (p - y) / n })
        .collect())
}

/// `lambda * sum(w^2)` over the weights (bias excluded).
pub fn l2_penalty(params: &LayerParams, lambda: f32) -> f64 {
    if lambda == 0.0 {
        return 0.0;
    }
    lambda as f64 * params.weights.data().iter().map(|&w| (w as f64).powi(2)).sum::<f64>()
}

/// Adds `2 * lambda * w` to the weight gradient, creating it if absent.
pub fn l2_accumulate_grad(params: &mut LayerParams, lambda: f32) {
    if lambda == 0.0 {
        return;
    }
    let contrib: Vec<f32> = params.weights.data().iter().map(|&w| 2.0 * lambda * w).collect();
    match params.weights.grad_mut() {
        Some(g) => g.iter_mut().zip(&contrib).for_each(|(g, c)| *g += c),
        None => params.weights.set_grad(contrib).expect("same length"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use crate::tensor::Tensor;
    use rand::Rng;

    fn per_sample(p: f64, y: f64) -> f64 {
        let p = p.clamp(1e-7, 1.0 - 1e-7);
        -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
    }

    #[test]
    fn confident_correct_prediction_costs_nothing() {
        let l = binary_crossentropy(&[1.0 - BCE_EPSILON], &[1.0]).unwrap();
        assert!(l < 1e-6);
    }

    #[test]
    fn half_is_ln2_for_either_label() {
        for y in [0.0, 1.0] {
            let l = binary_crossentropy(&[0.5], &[y]).unwrap();
            assert!((l as f64 - std::f64::consts::LN_2).abs() < 1e-6);
        }
    }

    #[test]
    fn batch_mean_matches_scalar_oracle() {
        let mut rng = seeded(8);
        let preds: Vec<f32> = (0..3).map(|_| rng.random_range(0.01..0.99)).collect();
        let labels: Vec<f32> = (0..3).map(|_| rng.random_range(0..2) as f32).collect();
        let expected: f64 = preds
            .iter()
            .zip(&labels)
            .map(|(&p, &y)| per_sample(p as f64, y as f64))
            .sum::<f64>()
            / 3.0;
        let got = binary_crossentropy(&preds, &labels).unwrap();
        assert!((got as f64 - expected).abs() < 1e-6);
    }

    #[test]
    fn extreme_predictions_stay_finite() {
        assert!(binary_crossentropy(&[0.0, 1.0], &[1.0, 0.0]).unwrap().is_finite());
        assert!(binary_crossentropy_grad(&[0.0, 1.0], &[1.0, 0.0])
            .unwrap()
            .iter()
            .all(|g| g.is_finite()));
    }

    #[test]
    fn saturated_logit_gradient() {
        let g = bce_sigmoid_logit_grad(&[1e-30, 1.0, 1.0, 0.0, 0.25], &[0.0, 1.0, 0.0, 1.0, 1.0]).unwrap();
        assert_eq!(g, vec![0.0, 0.0, 0.2, -0.2, -0.15]);
    }

    #[test]
    fn gradient_matches_finite_difference() {
        for (p, y) in [(0.3f64, 1.0f64), (0.8, 0.0), (0.55, 1.0)] {
            let h = 1e-6;
            let fd = (per_sample(p + h, y) - per_sample(p - h, y)) / (2.0 * h);
            let g = binary_crossentropy_grad(&[p as f32], &[y as f32]).unwrap()[0] as f64;
            assert!((g - fd).abs() / fd.abs() < 1e-4, "{g} vs {fd}");
        }
    }

    #[test]
    fn l2_reference_values() {
        let mut p = LayerParams::new(Tensor::full([1], 2.0), Tensor::full([1], 9.0));
        assert_eq!(l2_penalty(&p, 0.0), 0.0);
        assert!((l2_penalty(&p, 0.01) - 0.04).abs() < 1e-9);
        l2_accumulate_grad(&mut p, 0.01);
        assert!((p.weights.grad().unwrap()[0] - 0.04).abs() < 1e-7);
        assert!(p.bias.grad().is_none());

        let mut q = LayerParams::new(Tensor::full([2], 1.0), Tensor::zeros([1]));
        q.weights.set_grad(vec![0.5, -0.5]).unwrap();
        l2_accumulate_grad(&mut q, 0.0);
        assert_eq!(q.weights.grad().unwrap(), &[0.5, -0.5]);
    }

    #[test]
    fn l2_matches_sum_of_squares() {
        let mut rng = seeded(12);
        let w = Tensor::uniform([3, 3, 2, 4], -1.0, 1.0, &mut rng);
        let ss: f64 = w.data().iter().map(|&v| v as f64 * v as f64).sum();
        let p = LayerParams::new(w, Tensor::zeros([4]));
        assert!((l2_penalty(&p, 0.01) - 0.01f32 as f64 * ss).abs() < 1e-12);
    }
}
