//! Task conflict calibration for self-supervised learning, at desk scale.
//!
//! The crate is organised bottom-up:
//!
//! - [`numcore`]: dense matrices and a reverse-mode tape.
//! - [`scm`]: the two-task Gaussian factor model and its Bayes classifier.
//! - [`databatch`]: task construction (split, augment, mask) and IDX loading.
//! - [`encoder`]: the SSL network and its losses.
//! - [`calibration`]: factor extraction, weight extraction and calibration.
//! - [`trainer`]: the two-stage bi-level training loop.
//! - [`diagnostics`]: gradient conflict, frozen-feature probes, metric export.

pub mod calibration;
pub mod databatch;
pub mod diagnostics;
pub mod encoder;
pub mod error;
pub mod nn;
pub mod numcore;
pub mod rng;
pub mod scm;
pub mod trainer;

pub use error::{Error, Result};
pub use numcore::{Matrix, Tape, Var};
