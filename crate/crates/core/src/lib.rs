//! Visual relocalization against feature-augmented Gaussian-splat maps:
//! rendering, feature matching, image retrieval, pose estimation and
//! map fitting, plus the on-disk formats and CLI driving them.

pub mod error;
pub mod featurizer;
pub mod geometry;
pub mod image;
pub mod localizer;
pub mod mapfit;
pub mod matcher;
pub mod retrieval;
pub mod splat;
pub mod synth;

pub use error::{Error, Result};
