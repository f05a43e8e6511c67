//! Patch-level adversarial domain adaptation for semantic segmentation.
//!
//! Source label maps are summarized into 2×2 spatial label histograms and
//! clustered into patch modes. A categorization head predicts the mode of
//! every patch from the segmentation output, and a per-location
//! discriminator aligns target patch representations with the source modes.

pub mod bench;
pub mod config;
pub mod diffcore;
pub mod error;
pub mod eval;
pub mod losses;
pub mod nets;
pub mod patchmodes;
pub mod rng;
pub mod synthdata;
pub mod trainer;

pub use error::{Error, Result};
