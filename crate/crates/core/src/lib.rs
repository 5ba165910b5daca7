//! Unsupervised domain adaptation by attention alignment and EM self-training.
//!
//! The pipeline: a fixed, exactly invertible style translator pairs every
//! source image with a synthetic target image (and every target image with a
//! synthetic source image); a source network is trained on labeled source
//! data and frozen; a target network is then trained on all four streams
//! with supervised cross-entropy, an EM objective on the unlabeled streams,
//! and a penalty aligning its convolutional attention maps with the source
//! network's.

pub mod attention;
pub mod datagen;
pub mod discrepancy;
pub mod em_trainer;
pub mod error;
pub mod harness;
pub mod model;
pub mod optim;
pub mod par;
pub mod tensor;
pub mod translation;

pub use error::{Error, Result};
