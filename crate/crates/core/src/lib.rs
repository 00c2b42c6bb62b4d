//! Cross-modal 3D-to-2D feature distillation on synthetic indoor scenes.
//!
//! A 2D segmentation network learns to emit "simulated 3D" features that are
//! supervised by a frozen 3D point network, either through a paired L2
//! regression on projected point features or through per-category adversarial
//! alignment when no pairing exists. Two-stage dimension normalization
//! calibrates the feature statistics between the two modalities. Everything
//! runs on the CPU over a fully synthetic paired 2D/3D scene corpus.

pub mod config;
pub mod dataset;
pub mod dnorm;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod losses;
pub mod models;
pub mod pipeline;
pub mod report;
pub mod rng;
pub mod synthscene;
pub mod tensorcore;
pub mod training;

pub use error::{Error, Result};
pub use tensorcore::{ParamStore, Scalar, Tape, Tensor, Var};
