//! Threshold classification, confusion matrix, metrics and the batch report.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::{prepare, AugmentConfig, NormStats};
use crate::config::PreprocessConfig;
use crate::dataset::{list_class_files, FileFailure, CLASS_NAMES};
use crate::error::{Error, Result};
use crate::imgproc::{resize, Image};
use crate::model::ModelGraph;
use crate::par;
use crate::tensor::Tensor;

/// Scores strictly above this are the positive class.
pub const THRESHOLD: f32 = 0.5;

/// Label index of the positive class.
pub const POSITIVE: usize = 1;

pub fn classify(score: f32) -> usize {
    usize::from(score > THRESHOLD)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub source_path: PathBuf,
    pub score: f32,
    pub predicted: usize,
    pub truth: Option<usize>,
}

impl Prediction {
    pub fn new(source_path: impl Into<PathBuf>, score: f32, truth: Option<usize>) -> Self {
        Prediction {
            source_path: source_path.into(),
            score,
            predicted: classify(score),
            truth,
        }
    }

    pub fn predicted_class(&self) -> &'static str {
        CLASS_NAMES[self.predicted]
    }
}

/// Score formatted the way a `[[x]]` single-element array prints.
pub fn bracketed(score: f32) -> String {
    format!("[[{score}]]")
}

/// Counts with `pdr` as the positive class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

impl ConfusionMatrix {
    pub fn add(&mut self, truth: usize, predicted: usize) {
        match (truth == POSITIVE, predicted == POSITIVE) {
            (true, true) => self.tp += 1,
            (true, false) => self.fn_ += 1,
            (false, true) => self.fp += 1,
            (false, false) => self.tn += 1,
        }
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let mut cm = Self::default();
        for (truth, predicted) in pairs {
            cm.add(truth, predicted);
        }
        cm
    }

    pub fn from_predictions(preds: &[Prediction]) -> Result<Self> {
        let mut cm = Self::default();
        for p in preds {
            let truth = p
                .truth
                .ok_or_else(|| Error::Data(format!("{} has no true label", p.source_path.display())))?;
            cm.add(truth, p.predicted);
        }
        Ok(cm)
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn accuracy(&self) -> Result<f64> {
        match self.total() {
            0 => Err(Error::Data("accuracy of an empty confusion matrix".into())),
            n => Ok((self.tp + self.tn) as f64 / n as f64),
        }
    }

    /// `None` when nothing was predicted positive.
    pub fn precision(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fp)
    }

    /// `None` when there are no actual positives.
    pub fn recall(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> Option<f64> {
        ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_)
    }
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

fn metric(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |v| v.to_string())
}

/// Anything that maps images to positive-class scores.
pub trait Scorer: Sync {
    fn score_batch(&self, images: &[Image]) -> Result<Vec<f32>>;

    fn score(&self, image: &Image) -> Result<f32> {
        Ok(self.score_batch(std::slice::from_ref(image))?[0])
    }
}

/// A trained graph with its normalization statistics: resize to the graph
/// input, apply the training-time preprocessing, scale to `[0, 1]`,
/// normalize, run in inference mode.
pub struct ModelScorer<'a> {
    pub graph: &'a ModelGraph,
    pub stats: &'a NormStats,
    pub augment: AugmentConfig,
    pub preprocess: PreprocessConfig,
}

impl<'a> ModelScorer<'a> {
    pub fn new(graph: &'a ModelGraph, stats: &'a NormStats) -> Result<Self> {
        match graph.input_shape() {
            [_, _, 3] => {}
            other => return Err(Error::config(format!("model input {other:?} is not an RGB image"))),
        }
        if graph.output_shape() != [1] {
            return Err(Error::config(format!(
                "model output {:?} is not a single score",
                graph.output_shape()
            )));
        }
        Ok(ModelScorer {
            graph,
            stats,
            augment: AugmentConfig::default(),
            preprocess: PreprocessConfig::default(),
        })
    }
}

impl Scorer for ModelScorer<'_> {
    fn score_batch(&self, images: &[Image]) -> Result<Vec<f32>> {
        let (h, w) = (self.graph.input_shape()[0], self.graph.input_shape()[1]);
        let pieces = par::map_collect(images.len(), |i| {
            let img = self.preprocess.apply(&resize(&images[i], (w, h))?)?;
            prepare(&img, self.stats, &self.augment)
        });
        let mut data = Vec::with_capacity(images.len() * h * w * 3);
        for p in pieces {
            data.extend(p?.into_data());
        }
        let out = self.graph.predict(&Tensor::new([images.len(), h, w, 3], data)?)?;
        Ok(out.into_data())
    }
}

pub fn predict_file(scorer: &dyn Scorer, path: &Path) -> Result<Prediction> {
    let img = Image::load(path)?;
    Ok(Prediction::new(path, scorer.score(&img)?, None))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    /// Ordered by class, then file name.
    pub predictions: Vec<Prediction>,
    pub failures: Vec<FileFailure>,
    pub matrix: ConfusionMatrix,
}

/// Images scored per forward pass.
const REPORT_BATCH: usize = 16;

/// Score every image under a directory-per-class test root.
/// Unreadable files are listed in [`Report::failures`] and left out of the
/// counts.
pub fn batch_report(scorer: &dyn Scorer, test_dir: &Path) -> Result<Report> {
    let files = list_class_files(test_dir)?;
    let mut predictions = Vec::new();
    let mut failures = Vec::new();
    for chunk in files.chunks(REPORT_BATCH) {
        let loaded = par::map_collect(chunk.len(), |i| Image::load(&chunk[i].0));
        let mut images = Vec::new();
        let mut owners = Vec::new();
        for ((path, label), result) in chunk.iter().zip(loaded) {
            match result {
                Ok(img) => {
                    images.push(img);
                    owners.push((path.clone(), *label));
                }
                Err(e) => failures.push(FileFailure {
                    path: path.clone(),
                    message: e.to_string(),
                }),
            }
        }
        if images.is_empty() {
            continue;
        }
        let scores = scorer.score_batch(&images)?;
        for ((path, label), score) in owners.into_iter().zip(scores) {
            predictions.push(Prediction::new(path, score, Some(label)));
        }
    }
    let matrix = ConfusionMatrix::from_predictions(&predictions)?;
    Ok(Report {
        predictions,
        failures,
        matrix,
    })
}

impl Report {
    /// Predicted-class counts among images whose true class is `label`.
    pub fn class_counts(&self, label: usize) -> [usize; 2] {
        let mut counts = [0; 2];
        for p in self.predictions.iter().filter(|p| p.truth == Some(label)) {
            counts[p.predicted] += 1;
        }
        counts
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (label, class) in CLASS_NAMES.iter().enumerate() {
            let tag = class.to_uppercase();
            for p in self.predictions.iter().filter(|p| p.truth == Some(label)) {
                let name = p.source_path.file_name().unwrap_or_default().to_string_lossy();
                let _ = writeln!(out, "{tag} >>> {name}");
                let _ = writeln!(out, "{}", bracketed(p.score));
            }
            let [neg, pos] = self.class_counts(label);
            let _ = writeln!(out, "Number of retinas with PDR: {pos}");
            let _ = writeln!(out, "Number of retinas without PDR: {neg}");
            out.push('\n');
        }
        let m = &self.matrix;
        let _ = writeln!(out, "Confusion matrix (positive class: pdr)");
        let _ = writeln!(out, "{:<16}{:>16}{:>20}", "", "predicted pdr", "predicted nonPdr");
        let _ = writeln!(out, "{:<16}{:>16}{:>20}", "actual pdr", m.tp, m.fn_);
        let _ = writeln!(out, "{:<16}{:>16}{:>20}", "actual nonPdr", m.fp, m.tn);
        let _ = writeln!(out, "tp={} fp={} fn={} tn={}", m.tp, m.fp, m.fn_, m.tn);
        let accuracy = m.accuracy().ok();
        let _ = writeln!(out, "accuracy: {}", metric(accuracy));
        let _ = writeln!(out, "precision: {}", metric(m.precision()));
        let _ = writeln!(out, "recall: {}", metric(m.recall()));
        let _ = writeln!(out, "f1: {}", metric(m.f1()));
        if !self.failures.is_empty() {
            let _ = writeln!(out, "failed images: {}", self.failures.len());
            for f in &self.failures {
                let _ = writeln!(out, "  {}: {}", f.path.display(), f.message);
            }
        }
        out
    }

    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct Out<'a> {
            #[serde(flatten)]
            report: &'a Report,
            accuracy: Option<f64>,
            precision: Option<f64>,
            recall: Option<f64>,
            f1: Option<f64>,
        }
        serde_json::to_string_pretty(&Out {
            report: self,
            accuracy: self.matrix.accuracy().ok(),
            precision: self.matrix.precision(),
            recall: self.matrix.recall(),
            f1: self.matrix.f1(),
        })
        .expect("report serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use rand::Rng;

    #[test]
    fn threshold_is_strict() {
        assert_eq!(classify(0.106_583_25), 0);
        assert_eq!(classify(0.969_182_3), 1);
        assert_eq!(classify(0.5), 0);
        assert_eq!(classify(f32::from_bits(0.5f32.to_bits() + 1)), 1);
    }

    #[test]
    fn symmetric_matrix_metrics() {
        let mut pairs = Vec::new();
        pairs.extend(std::iter::repeat_n((1, 1), 41));
        pairs.extend(std::iter::repeat_n((1, 0), 9));
        pairs.extend(std::iter::repeat_n((0, 1), 9));
        pairs.extend(std::iter::repeat_n((0, 0), 41));
        let cm = ConfusionMatrix::from_pairs(pairs);
        assert_eq!(
            cm,
            ConfusionMatrix {
                tp: 41,
                fp: 9,
                fn_: 9,
                tn: 41
            }
        );
        assert_eq!(cm.accuracy().unwrap(), 0.82);
        assert_eq!(cm.precision(), Some(0.82));
        assert_eq!(cm.recall(), Some(0.82));
        assert_eq!(cm.f1(), Some(0.82));
    }

    #[test]
    fn small_matrices() {
        let cm = ConfusionMatrix::from_pairs([(1, 1), (1, 1), (0, 0), (0, 0)]);
        assert_eq!((cm.tp, cm.tn, cm.fp, cm.fn_), (2, 2, 0, 0));
        assert_eq!(cm.accuracy().unwrap(), 1.0);
        let cm = ConfusionMatrix {
            tp: 3,
            tn: 1,
            fp: 2,
            fn_: 2,
        };
        assert_eq!(cm.accuracy().unwrap(), 0.5);
        assert!(ConfusionMatrix::default().accuracy().is_err());
        assert_eq!(ConfusionMatrix::default().precision(), None);
    }

    #[test]
    fn random_pairs_match_four_way_count() {
        let mut rng = seeded(20);
        for _ in 0..10 {
            let pairs: Vec<(usize, usize)> = (0..20).map(|_| (rng.random_range(0..2), rng.random_range(0..2))).collect();
            let cm = ConfusionMatrix::from_pairs(pairs.iter().copied());
            let count = |t, p| pairs.iter().filter(|&&x| x == (t, p)).count();
            assert_eq!((cm.tp, cm.fn_, cm.fp, cm.tn), (count(1, 1), count(1, 0), count(0, 1), count(0, 0)));
            assert_eq!(cm.total(), 20);
            let mut reversed = pairs.clone();
            reversed.reverse();
            assert_eq!(ConfusionMatrix::from_pairs(reversed), cm);
        }
    }

    #[test]
    fn missing_truth_is_an_error() {
        let p = Prediction::new("x.png", 0.7, None);
        assert!(ConfusionMatrix::from_predictions(&[p]).is_err());
    }

    #[test]
    fn bracketed_score_format() {
        assert_eq!(bracketed(0.922_791_4), "[[0.9227914]]");
        assert_eq!(bracketed(0.670_009), "[[0.670009]]");
    }
}
