//! Directory-per-class ingestion, class balancing and split bookkeeping.
//!
//! A corpus root holds one subdirectory per class:
//!
//! ```text
//! <root>/nonPdr/*.{png,jpg,jpeg}
//! <root>/pdr/*.{png,jpg,jpeg}
//! ```
//!
//! Entries whose names start with `.` are skipped. Directories and files are
//! visited in sorted order so that sample order, and everything seeded
//! downstream of it, is reproducible.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::Rng;

use crate::error::{Error, Result};
use crate::imgproc::{resize, Image};
use crate::par;

/// Class names; a sample's label is its class's index here.
pub const CLASS_NAMES: [&str; 2] = ["nonPdr", "pdr"];

pub const DEFAULT_IMAGE_SIZE: usize = 224;

#[derive(Clone, Debug)]
pub struct Sample {
    pub image: Image,
    pub label: usize,
    pub source_path: PathBuf,
}

/// A file that could not be decoded.
#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct FileFailure {
    pub path: PathBuf,
    pub message: String,
}

#[derive(Clone, Debug, Default)]
pub struct ReadOutcome {
    pub samples: Vec<Sample>,
    pub failures: Vec<FileFailure>,
}

impl ReadOutcome {
    pub fn images(&self) -> impl Iterator<Item = &Image> {
        self.samples.iter().map(|s| &s.image)
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }
}

pub fn class_index(name: &str) -> Option<usize> {
    CLASS_NAMES.iter().position(|&c| c == name)
}

fn sorted_visible_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::file(dir, e))? {
        let entry = entry.map_err(|e| Error::file(dir, e))?;
        if entry.file_name().to_string_lossy().starts_with('.') {
            continue;
        }
        entries.push(entry.path());
    }
    entries.sort();
    Ok(entries)
}

/// Every visible file under each class directory of `root`, labeled.
///
/// Unknown class directory names are a configuration error. A class
/// directory that is absent simply contributes nothing.
pub fn list_class_files(root: &Path) -> Result<Vec<(PathBuf, usize)>> {
    if !root.is_dir() {
        return Err(Error::file(root, "not a directory"));
    }
    let mut out = Vec::new();
    for dir in sorted_visible_entries(root)? {
        if !dir.is_dir() {
            log::warn!("ignoring non-directory entry {}", dir.display());
            continue;
        }
        let name = dir.file_name().unwrap_or_default().to_string_lossy().into_owned();
        let label = class_index(&name).ok_or_else(|| {
            Error::config(format!(
                "unknown class directory `{name}` in {} (expected one of {CLASS_NAMES:?})",
                root.display()
            ))
        })?;
        for file in sorted_visible_entries(&dir)? {
            if file.is_file() {
                out.push((file, label));
            }
        }
    }
    // Label-major order regardless of how directory names sort.
    out.sort_by_key(|(_, label)| *label);
    Ok(out)
}

/// Load every image under `root`, resized to `size x size`.
///
/// Undecodable files are reported in [`ReadOutcome::failures`] and skipped.
pub fn read_images(root: &Path, size: usize) -> Result<ReadOutcome> {
    let files = list_class_files(root)?;
    let decoded = par::map_collect(files.len(), |i| {
        let (path, _) = &files[i];
        Image::load(path).and_then(|img| resize(&img, (size, size)))
    });
    let mut outcome = ReadOutcome::default();
    for ((path, label), result) in files.into_iter().zip(decoded) {
        match result {
            Ok(image) => outcome.samples.push(Sample {
                image,
                label,
                source_path: path,
            }),
            Err(e) => {
                log::warn!("skipping {}: {e}", path.display());
                outcome.failures.push(FileFailure {
                    path,
                    message: e.to_string(),
                });
            }
        }
    }
    Ok(outcome)
}

pub fn class_counts(samples: &[Sample]) -> [usize; 2] {
    let mut counts = [0; 2];
    for s in samples {
        counts[s.label] += 1;
    }
    counts
}

/// Draw exactly `per_class` samples of each class without replacement.
/// Selected samples keep their relative input order, class 0 first.
pub fn balance(samples: Vec<Sample>, per_class: usize, rng: &mut impl Rng) -> Result<Vec<Sample>> {
    let counts = class_counts(&samples);
    for (label, &count) in counts.iter().enumerate() {
        if count < per_class {
            return Err(Error::Data(format!(
                "class `{}` has {count} samples, {per_class} requested",
                CLASS_NAMES[label]
            )));
        }
    }
    let mut by_class: [Vec<Sample>; 2] = Default::default();
    for s in samples {
        let label = s.label;
        by_class[label].push(s);
    }
    let mut out = Vec::with_capacity(2 * per_class);
    for class in by_class {
        let mut picks = index::sample(rng, class.len(), per_class).into_vec();
        picks.sort_unstable();
        let mut slots: Vec<Option<Sample>> = class.into_iter().map(Some).collect();
        out.extend(picks.into_iter().map(|i| slots[i].take().expect("indices are distinct")));
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct DatasetSplit {
    pub train: Vec<Sample>,
    pub valid: Vec<Sample>,
    pub test: Vec<Sample>,
    pub class_names: [&'static str; 2],
    pub failures: Vec<FileFailure>,
}

impl DatasetSplit {
    pub fn partitions(&self) -> [(&'static str, &[Sample]); 3] {
        [("train", &self.train), ("valid", &self.valid), ("test", &self.test)]
    }

    pub fn is_balanced(samples: &[Sample]) -> bool {
        let [a, b] = class_counts(samples);
        a == b
    }

    /// Per-partition, per-class counts as plain text.
    pub fn manifest(&self) -> String {
        let mut out = String::new();
        for (name, samples) in self.partitions() {
            let [a, b] = class_counts(samples);
            let _ = writeln!(
                out,
                "{name}: total={} {}={a} {}={b} balanced={}",
                samples.len(),
                self.class_names[0],
                self.class_names[1],
                Self::is_balanced(samples)
            );
        }
        if !self.failures.is_empty() {
            let _ = writeln!(out, "failed files: {}", self.failures.len());
        }
        out
    }
}

/// Read three disjoint corpus roots into a split.
pub fn make_splits(train_dir: &Path, valid_dir: &Path, test_dir: &Path, size: usize) -> Result<DatasetSplit> {
    let mut failures = Vec::new();
    let mut read = |dir: &Path, name: &str| -> Result<Vec<Sample>> {
        let outcome = read_images(dir, size)?;
        failures.extend(outcome.failures);
        if outcome.samples.is_empty() {
            return Err(Error::Data(format!("{name} partition at {} is empty", dir.display())));
        }
        Ok(outcome.samples)
    };
    let train = read(train_dir, "train")?;
    let valid = read(valid_dir, "valid")?;
    let test = read(test_dir, "test")?;
    let split = DatasetSplit {
        train,
        valid,
        test,
        class_names: CLASS_NAMES,
        failures,
    };
    for (name, samples) in split.partitions() {
        if !DatasetSplit::is_balanced(samples) {
            log::warn!("{name} partition is unbalanced: {:?}", class_counts(samples));
        }
    }
    Ok(split)
}
