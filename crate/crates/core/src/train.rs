//! The fit loop: epochs over the augmented stream, validation after each
//! epoch, early stopping on validation loss.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::augment::{prepare, AugmentConfig, AugmentedStream, NormStats};
use crate::dataset::Sample;
use crate::error::{Error, Result};
use crate::model::{ModelGraph, WeightStore};
use crate::ops::binary_crossentropy;
use crate::optim::OptimizerConfig;
use crate::par;
use crate::rng;
use crate::tensor::Tensor;

const STREAM_DROPOUT: u64 = 0x4452;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Monitor {
    #[default]
    ValLoss,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EarlyStoppingConfig {
    pub monitor: Monitor,
    /// Non-improving epochs tolerated before stopping.
    pub patience: usize,
    /// Put back the weights of the best epoch when training ends.
    pub restore_best: bool,
}

impl Default for EarlyStoppingConfig {
    fn default() -> Self {
        EarlyStoppingConfig {
            monitor: Monitor::ValLoss,
            patience: 0,
            restore_best: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub early_stopping: EarlyStoppingConfig,
    /// Set from the run-level seed rather than read from the file.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 32,
            optimizer: OptimizerConfig::default(),
            early_stopping: EarlyStoppingConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("train.epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size must be at least 1"));
        }
        self.optimizer.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Decision {
    Improved,
    /// No improvement, patience not yet exhausted.
    Wait,
    Stop,
    /// The monitored value was NaN or infinite.
    NonFinite,
}

/// Minimum-tracking early-stopping state machine.
#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStopper {
    pub best: f64,
    pub waits: usize,
    pub patience: usize,
    pub stopped: bool,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        EarlyStopper {
            best: f64::INFINITY,
            waits: 0,
            patience,
            stopped: false,
        }
    }

    pub fn update(&mut self, value: f64) -> Decision {
        if !value.is_finite() {
            self.stopped = true;
            return Decision::NonFinite;
        }
        if value < self.best {
            self.best = value;
            self.waits = 0;
            return Decision::Improved;
        }
        self.waits += 1;
        if self.waits > self.patience {
            self.stopped = true;
            Decision::Stop
        } else {
            Decision::Wait
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Completed,
    EarlyStop,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub records: Vec<EpochRecord>,
    pub stop_reason: StopReason,
    pub best_epoch: usize,
    /// Whether the weights were rolled back to `best_epoch`.
    pub restored_best: bool,
}

impl History {
    /// Tab-separated log, one line per epoch after a header.
    pub fn to_log(&self) -> String {
        let mut out = String::from("epoch\ttrain_loss\ttrain_acc\tval_loss\tval_acc\n");
        for r in &self.records {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}",
                r.epoch, r.train_loss, r.train_acc, r.val_loss, r.val_acc
            );
        }
        let _ = writeln!(
            out,
            "# stop_reason={} best_epoch={} restored_best={}",
            match self.stop_reason {
                StopReason::Completed => "completed",
                StopReason::EarlyStop => "early_stop",
            },
            self.best_epoch,
            self.restored_best
        );
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("history serializes")
    }
}

/// Count of predictions on the right side of 0.5.
fn correct(preds: &[f32], labels: &[f32]) -> usize {
    preds.iter().zip(labels).filter(|(&p, &y)| (p > 0.5) == (y > 0.5)).count()
}

/// Inference-mode loss (cross-entropy plus L2 terms) and accuracy over
/// `samples`, processed in batches of `batch_size`.
pub fn evaluate_epoch(
    graph: &ModelGraph,
    samples: &[Sample],
    stats: &NormStats,
    augment: &AugmentConfig,
    batch_size: usize,
) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty set".into()));
    }
    let preds = predict_samples(graph, samples, stats, augment, batch_size)?;
    let labels: Vec<f32> = samples.iter().map(|s| s.label as f32).collect();
    let loss = binary_crossentropy(&preds, &labels)? as f64 + graph.l2_penalty();
    let acc = correct(&preds, &labels) as f64 / samples.len() as f64;
    Ok((loss, acc))
}

/// Inference-mode scores for every sample, in order.
pub fn predict_samples(
    graph: &ModelGraph,
    samples: &[Sample],
    stats: &NormStats,
    augment: &AugmentConfig,
    batch_size: usize,
) -> Result<Vec<f32>> {
    let mut preds = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let pieces = par::map_collect(chunk.len(), |i| prepare(&chunk[i].image, stats, augment));
        let mut data = Vec::new();
        for p in pieces {
            data.extend(p?.into_data());
        }
        let mut shape = vec![chunk.len()];
        shape.extend_from_slice(graph.input_shape());
        let out = graph.predict(&Tensor::new(shape, data)?)?;
        preds.extend_from_slice(out.data());
    }
    Ok(preds)
}

/// Train `graph` in place.
///
/// Each epoch makes one pass over a freshly shuffled, augmented stream,
/// stepping the optimizer once per batch, then evaluates the validation set
/// without augmentation. `on_epoch` sees each record as it is produced.
/// A non-finite training or validation loss aborts with
/// [`Error::NonFiniteLoss`].
pub fn fit(
    graph: &mut ModelGraph,
    train: &[Sample],
    valid: &[Sample],
    stats: &NormStats,
    augment: &AugmentConfig,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<History> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    if valid.is_empty() {
        return Err(Error::Data("validation set is empty".into()));
    }
    let mut optimizer = cfg.optimizer.build()?;
    let mut stopper = EarlyStopper::new(cfg.early_stopping.patience);
    let mut best_epoch = 0;
    let mut snapshot: Option<WeightStore> = None;
    let mut records = Vec::new();
    let mut stop_reason = StopReason::Completed;

    for epoch in 1..=cfg.epochs {
        let e = epoch as u64;
        let stream = AugmentedStream::new(train, augment, stats, cfg.batch_size, cfg.seed, e)?;
        let mut dropout_rng = rng::derive(cfg.seed, &[STREAM_DROPOUT, e]);
        let (mut loss_sum, mut hits) = (0.0f64, 0usize);
        for batch in stream {
            let step = graph.loss_and_backward(&batch.inputs, &batch.labels, &mut dropout_rng)?;
            if !step.loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch });
            }
            optimizer.step(graph.weights_mut())?;
            loss_sum += step.loss * batch.labels.len() as f64;
            hits += correct(&step.preds, &batch.labels);
        }
        let (val_loss, val_acc) = evaluate_epoch(graph, valid, stats, augment, cfg.batch_size)?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            train_acc: hits as f64 / train.len() as f64,
            val_loss,
            val_acc,
        };
        log::info!(
            "epoch {epoch}/{}: loss {:.4} acc {:.4} val_loss {:.4} val_acc {:.4}",
            cfg.epochs,
            record.train_loss,
            record.train_acc,
            record.val_loss,
            record.val_acc
        );
        on_epoch(&record);
        records.push(record);
        match stopper.update(val_loss) {
            Decision::NonFinite => return Err(Error::NonFiniteLoss { epoch }),
            Decision::Improved => {
                best_epoch = epoch;
                if cfg.early_stopping.restore_best {
                    snapshot = Some(graph.weights().clone());
                }
            }
            Decision::Wait => {}
            Decision::Stop => {
                log::info!("early stopping after epoch {epoch}");
                stop_reason = StopReason::EarlyStop;
                break;
            }
        }
    }

    let restored_best = match snapshot {
        Some(store) if best_epoch != records.len() => {
            *graph.weights_mut() = store;
            true
        }
        _ => false,
    };
    Ok(History {
        records,
        stop_reason,
        best_epoch,
        restored_best,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stopper_examples() {
        let run = |seq: &[f64], patience| -> Vec<Decision> {
            let mut s = EarlyStopper::new(patience);
            seq.iter().map(|&v| s.update(v)).collect()
        };
        use Decision::*;
        assert_eq!(run(&[0.5, 0.4, 0.3], 0), vec![Improved; 3]);
        assert_eq!(run(&[0.5, 0.6], 0), vec![Improved, Stop]);
        assert_eq!(run(&[0.5, 0.55, 0.45, 0.46], 1), vec![Improved, Wait, Improved, Wait]);
        assert_eq!(run(&[0.5, f64::NAN], 3), vec![Improved, NonFinite]);
    }

    #[test]
    fn stopper_keeps_the_minimum() {
        let mut s = EarlyStopper::new(10);
        for v in [0.9, 0.3, 0.5, 0.3, 0.7] {
            s.update(v);
        }
        assert_eq!(s.best, 0.3);
        assert_eq!(s.waits, 3);
        assert!(!s.stopped);
    }

    #[test]
    fn config_defaults() {
        let cfg = TrainConfig::default();
        assert_eq!((cfg.epochs, cfg.batch_size), (10, 32));
        assert_eq!(cfg.early_stopping.patience, 0);
        assert_eq!(cfg.optimizer, OptimizerConfig::adam(1e-4));
        assert!(TrainConfig { epochs: 0, ..cfg }.validate().is_err());
    }
}
