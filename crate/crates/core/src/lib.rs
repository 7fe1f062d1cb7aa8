//! Unsupervised domain adaptation for semantic segmentation with a zero-style
//! objective, MPT self-training, and tail-class content transfer, at desk
//! scale on a procedural twin-domain dataset.

pub mod autograd;
pub mod config;
pub mod content_transfer;
pub mod datamodel;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod networks;
pub mod pseudolabel;
pub mod synthdata;
pub mod trainer;

pub use error::{Error, Result};
