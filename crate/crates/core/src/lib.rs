//! Multi-task segmentation and self-supervised depth estimation with
//! adversarial robustness evaluation.

mod error;
pub mod evaluation;
pub mod geometry;
pub mod losses;
pub mod network;
pub mod perturb;
pub mod synthdata;
pub mod trainer;

pub use error::{Error, Result};
