//! Day/night stereo visual localization.
//!
//! The pipeline transforms a night target image toward day appearance
//! ([`transnet`]), detects keypoints and dense descriptors in both images
//! ([`featnet`]), soft-matches them and recovers the relative pose with a
//! differentiable weighted SVD solve ([`matchpose`]). [`synthdata`] renders
//! a synthetic street-scene dataset with ground-truth poses, [`trainer`] runs
//! the four training schemes and [`eval`] computes localization metrics.

pub mod camera;
pub mod config;
pub mod error;
pub mod eval;
pub mod featnet;
pub mod gradsuite;
pub mod matchpose;
pub mod nn;
pub mod pipeline;
pub mod synthdata;
pub mod trainer;
pub mod transnet;

pub use camera::{ImageObservation, StereoCamera};
pub use error::{Error, Result};
pub use matchpose::{MatchSet, MatcherConfig, SE3Pose};
