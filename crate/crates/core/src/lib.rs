//! Fundus-photograph classification toolkit.
//!
//! The crate covers the whole screening pipeline for proliferative diabetic
//! retinopathy: image preprocessing ([`imgproc`]), directory-per-class
//! ingestion ([`dataset`]), augmentation and feature-wise normalization
//! ([`augment`]), a small NHWC tensor library with hand-written forward and
//! backward kernels ([`tensor`], [`ops`]), network construction including a
//! VGG-16 transfer-learning graph ([`model`]), optimizers ([`optim`]), the
//! training loop with early stopping ([`train`]) and evaluation ([`eval`]).
//!
//! Compute kernels run data-parallel over rows and batch elements through
//! rayon when the `parallel` feature is on (the default). Every reduction has
//! a fixed order, so serial and parallel runs are bit-identical.

pub mod augment;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod imgproc;
pub mod model;
pub mod ops;
pub mod optim;
pub mod par;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
