//! Visible-infrared person re-identification.
//!
//! Grayscale-spectrum augmentation, a partially shared dual-path extractor,
//! a dual-linear batch-normalized identity head and the bi-directional
//! tri-constrained top-push ranking objective, with the evaluation and
//! training machinery around them.

pub mod ablation;
pub mod backbone;
pub mod dataset;
pub mod error;
pub mod evaluator;
pub mod head;
pub mod losses;
pub mod model;
pub mod nn;
pub mod optim;
pub mod sampler;
pub mod spectral;
pub mod trainer;

pub use error::{Error, Result};
