use std::path::Path;

use fundus::eval::{batch_report, Scorer};
use fundus::imgproc::Image;
use fundus::Result;

/// Scores an image by its mean blue value over 255.
struct BlueScorer;

impl Scorer for BlueScorer {
    fn score_batch(&self, images: &[Image]) -> Result<Vec<f32>> {
        Ok(images
            .iter()
            .map(|img| {
                let blue: u64 = img.data().chunks_exact(3).map(|p| p[0] as u64).sum();
                blue as f32 / (img.height() * img.width()) as f32 / 255.0
            })
            .collect())
    }
}

fn solid(dir: &Path, name: &str, blue: u8) {
    std::fs::create_dir_all(dir).unwrap();
    Image::from_fn(4, 4, |_, _| [blue, 10, 10]).save(&dir.join(name)).unwrap();
}

#[test]
fn report_with_an_empty_class_directory() {
    let root = tempfile::tempdir().unwrap();
    std::fs::create_dir_all(root.path().join("nonPdr")).unwrap();
    let pdr = root.path().join("pdr");
    solid(&pdr, "a.png", 255);
    solid(&pdr, "b.png", 204);
    solid(&pdr, "c.png", 51);
    std::fs::write(pdr.join("d.png"), b"not an image").unwrap();

    let report = batch_report(&BlueScorer, root.path()).unwrap();
    assert_eq!(report.predictions.len(), 3);
    assert_eq!(report.failures.len(), 1);
    assert!(report.failures[0].path.ends_with("d.png"));
    let m = &report.matrix;
    assert_eq!((m.tp, m.fp, m.fn_, m.tn), (2, 0, 1, 0));
    assert_eq!(report.class_counts(0), [0, 0]);
    assert_eq!(report.class_counts(1), [1, 2]);

    let text = report.to_text();
    assert!(text.contains("PDR >>> a.png\n[[1]]\n"), "{text}");
    assert!(text.contains("PDR >>> b.png\n[[0.8]]\n"), "{text}");
    assert!(text.contains("PDR >>> c.png\n[[0.2]]\n"), "{text}");
    assert_eq!(text.matches("Number of retinas with PDR: 0").count(), 1);
    assert!(text.contains("Number of retinas with PDR: 2\nNumber of retinas without PDR: 1"));
    assert!(text.contains("precision: 1"));
    assert!(text.contains("failed images: 1"));

    let json: serde_json::Value = serde_json::from_str(&report.to_json()).unwrap();
    assert_eq!(json["matrix"]["fn"], 1);
    assert!((json["recall"].as_f64().unwrap() - 2.0 / 3.0).abs() < 1e-12);
}

#[test]
fn report_on_an_empty_corpus_has_undefined_metrics() {
    let root = tempfile::tempdir().unwrap();
    for class in ["nonPdr", "pdr"] {
        std::fs::create_dir_all(root.path().join(class)).unwrap();
    }
    let report = batch_report(&BlueScorer, root.path()).unwrap();
    assert!(report.predictions.is_empty());
    let text = report.to_text();
    assert!(text.contains("accuracy: undefined"), "{text}");
}

#[test]
fn unknown_class_directory_is_rejected() {
    let root = tempfile::tempdir().unwrap();
    solid(&root.path().join("maybe"), "a.png", 1);
    assert!(batch_report(&BlueScorer, root.path()).is_err());
}
