//! Mixture-of-experts classification of cytotoxic edema from paired DWI/ADC
//! brain volumes.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`], [`ops`], [`nn`], [`optim`], [`gradcheck`]: a small dense
//!   tensor engine with reverse-mode gradients and Adam.
//! - [`io`]: the MVOL volume container, cohort manifests and checkpoints.
//! - [`preprocess`]: masking, isotropic resampling, normalization, augmentation.
//! - [`models`]: the DWI and ADC expert networks and the weighted-average combiner.
//! - [`trainer`]: subject-grouped splits and the training loop.
//! - [`metrics`]: confusion metrics, ROC/AUC, subject-level voting.
//! - [`correlation`]: logistic-regression association with outcome labels.
//! - [`phantom`]: a seeded synthetic DWI/ADC cohort.

pub mod correlation;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod ops;
pub mod optim;
pub mod phantom;
pub mod preprocess;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{DType, Scalar, Tensor};
