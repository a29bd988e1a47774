//! The TOML run configuration.
//!
//! ```toml
//! seed = 0
//! architecture = "vgg16-transfer"   # or "sequential-v1", "functional-v2"
//! input_size = 224                  # square side; architecture default when absent
//! freeze = { through = "block4_pool" }
//! pretrained = "vgg16_base.fdl"     # optional base weights
//!
//! [paths]
//! train_dir = "data/train"
//! valid_dir = "data/valid"
//! test_dir = "data/test"
//! model_out = "runs/model.fdl"
//! output_dir = "runs"
//!
//! [train]
//! epochs = 10
//! batch_size = 32
//! optimizer = { kind = "adam", lr = 1e-4 }
//! early_stopping = { monitor = "val_loss", patience = 0, restore_best = true }
//!
//! [augment]
//! rotation_range = 30.0
//!
//! [preprocess]
//! blur_enabled = false
//! blur_sigma = 13.333333333333334
//! clahe_enabled = false
//! clahe_clip = 40.0
//! clahe_grid = [8, 8]
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::AugmentConfig;
use crate::error::{Error, Result};
use crate::imgproc::{blur_enhance, clahe, ClaheParams, Image, DEFAULT_CLIP_LIMIT, DEFAULT_GRID};
use crate::model::{Architecture, FreezePolicy};
use crate::train::TrainConfig;

/// Environment variable naming the config file when `--config` is absent.
pub const CONFIG_ENV: &str = "FUNDUS_CONFIG";

/// File name of the resolved config written next to run outputs.
pub const EFFECTIVE_CONFIG: &str = "effective_config.toml";

/// Blur-enhancement sigma, `400 / 30`.
pub const DEFAULT_BLUR_SIGMA: f64 = 400.0 / 30.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub train_dir: PathBuf,
    pub valid_dir: PathBuf,
    pub test_dir: PathBuf,
    pub model_out: PathBuf,
    /// History, dataset manifest, effective config and reports go here.
    pub output_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            train_dir: "data/train".into(),
            valid_dir: "data/valid".into(),
            test_dir: "data/test".into(),
            model_out: "runs/model.fdl".into(),
            output_dir: "runs".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    pub blur_enabled: bool,
    pub blur_sigma: f64,
    pub clahe_enabled: bool,
    pub clahe_clip: f64,
    /// Tiles along x and y.
    pub clahe_grid: [usize; 2],
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            blur_enabled: false,
            blur_sigma: DEFAULT_BLUR_SIGMA,
            clahe_enabled: false,
            clahe_clip: DEFAULT_CLIP_LIMIT,
            clahe_grid: [DEFAULT_GRID.0, DEFAULT_GRID.1],
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.blur_sigma.is_finite() && self.blur_sigma > 0.0) {
            return Err(Error::config(format!("preprocess.blur_sigma must be positive, got {}", self.blur_sigma)));
        }
        if !(self.clahe_clip.is_finite() && self.clahe_clip > 0.0) {
            return Err(Error::config(format!("preprocess.clahe_clip must be positive, got {}", self.clahe_clip)));
        }
        if self.clahe_grid.contains(&0) {
            return Err(Error::config("preprocess.clahe_grid entries must be at least 1"));
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        !self.blur_enabled && !self.clahe_enabled
    }

    pub fn clahe_params(&self) -> ClaheParams {
        ClaheParams {
            clip_limit: self.clahe_clip,
            grid: (self.clahe_grid[0], self.clahe_grid[1]),
        }
    }

    /// Blur enhancement first, then CLAHE, each only when enabled.
    pub fn apply(&self, img: &Image) -> Result<Image> {
        let mut out = img.clone();
        if self.blur_enabled {
            out = blur_enhance(&out, self.blur_sigma)?;
        }
        if self.clahe_enabled {
            out = clahe(&out, self.clahe_params())?;
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub architecture: Architecture,
    pub input_size: Option<usize>,
    pub freeze: Option<FreezePolicy>,
    pub pretrained: Option<PathBuf>,
    pub paths: PathsConfig,
    pub train: TrainConfig,
    pub augment: AugmentConfig,
    pub preprocess: PreprocessConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            architecture: Architecture::Vgg16Transfer,
            input_size: None,
            freeze: None,
            pretrained: None,
            paths: PathsConfig::default(),
            train: TrainConfig::default(),
            augment: AugmentConfig::default(),
            preprocess: PreprocessConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        Ok(cfg.resolved())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Fill every optional field with its architecture default and copy the
    /// run seed into the training config.
    pub fn resolved(mut self) -> Self {
        self.input_size.get_or_insert(self.architecture.default_input_size());
        self.freeze.get_or_insert_with(|| self.architecture.default_freeze());
        self.train.seed = self.seed;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.train.seed = seed;
        self
    }

    pub fn input_size(&self) -> usize {
        self.input_size.unwrap_or(self.architecture.default_input_size())
    }

    pub fn freeze_policy(&self) -> FreezePolicy {
        self.freeze.clone().unwrap_or_else(|| self.architecture.default_freeze())
    }

    /// Checks that need no filesystem access.
    pub fn validate(&self) -> Result<()> {
        if self.input_size() == 0 {
            return Err(Error::config("input_size must be at least 1"));
        }
        if self.pretrained.is_some() && self.architecture != Architecture::Vgg16Transfer {
            return Err(Error::config("pretrained is only supported for architecture \"vgg16-transfer\""));
        }
        if self.paths.model_out.as_os_str().is_empty() {
            return Err(Error::config("paths.model_out must not be empty"));
        }
        self.train.validate()?;
        self.augment.validate()?;
        self.preprocess.validate()?;
        let size = self.input_size();
        self.architecture
            .spec(size, size)
            .and_then(|spec| spec.shapes())
            .map_err(|e| Error::config(format!("input_size {size} does not fit the architecture: {e}")))?;
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run config serializes")
    }

    /// Write the resolved config to `output_dir/effective_config.toml`.
    pub fn echo(&self) -> Result<PathBuf> {
        std::fs::create_dir_all(&self.paths.output_dir)?;
        let path = self.paths.output_dir.join(EFFECTIVE_CONFIG);
        std::fs::write(&path, self.to_toml())?;
        Ok(path)
    }
}

/// Config error unless `path` is an existing directory. `field` names the
/// config key.
pub fn require_dir(field: &str, path: &Path) -> Result<()> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(Error::config(format!("{field}: directory {} does not exist", path.display())))
    }
}
