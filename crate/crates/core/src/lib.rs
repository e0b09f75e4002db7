//! Weakly-supervised text instance segmentation.
//!
//! A convolutional pyramid with learned cross-level fusion feeds an
//! attention-based sequence recognizer. Each decoding step's attention map
//! becomes a per-character soft label, which text adaptive refinement (TAR)
//! sharpens against feature and RGB guidance. A segmentation head trained on
//! those pseudo labels produces masks at three levels that are ensembled.

mod error;

pub mod config;
pub mod contrastive;
pub mod imageio;
pub mod init;
pub mod pipeline;
pub mod pyramid;
pub mod recognizer;
pub mod seghead;
pub mod synth;
pub mod tar;
pub mod tensor;

pub use error::{Error, Result};
