//! Joint 3D residual U-Net for lung nodule segmentation and texture
//! classification, with a Fleischner follow-up pipeline.
//!
//! The crate is organized around a small hand-written tensor/autodiff
//! core (`tensor`), network blocks assembled from it (`nn`), the training
//! losses (`loss`), volumetric augmentations (`augment`), the follow-up
//! feature/Random-Forest pipeline (`fleischner`), segmentation-agreement
//! metrics (`metrics`), and the synthetic-phantom training harness
//! (`phantom`, `train`, the `noduleseg` binary).

pub mod augment;
pub mod error;
pub mod fleischner;
pub mod gradcheck;
pub mod io;
pub mod loss;
pub mod metrics;
pub mod nn;
pub mod phantom;
pub mod train;
pub mod tensor;

pub use error::{Error, Result};
