//! Self-supervised adaptation of frozen patch descriptors for two-view
//! matching, with epipolar evaluation.
//!
//! The crate is organised as a pipeline:
//!
//! - [`geometry`]: pinhole intrinsics, SE(3) poses, projection and epipolar algebra.
//! - [`synthesis`]: z-buffered forward warping into randomly sampled novel views,
//!   producing pseudo-ground-truth correspondences; procedural test scenes.
//! - [`embedding`]: patch feature maps, the adaptation transformer block, the
//!   pseudo-backbone used when no pretrained extractor is available.
//! - [`training`]: triplet mining, triplet loss, analytic gradients and Adam.
//! - [`matching`]: cosine similarity, mutual nearest neighbours, phase-correlation refinement.
//! - [`evaluation`]: epipolar error, precision, RANSAC fundamental estimation and reports.
//! - [`experiments`]: the synthetic benchmark used for ablation and robustness runs.
//! - [`io`]: binary feature/depth/checkpoint containers, PNG and CSV helpers.

pub mod embedding;
pub mod error;
pub mod evaluation;
pub mod experiments;
pub mod geometry;
pub mod io;
pub mod matching;
pub mod raster;
pub mod seed;
pub mod synthesis;
pub mod training;

pub use error::{Error, Result};
pub use geometry::{FundamentalMatrix, Intrinsics, Pixel, Pose};
pub use raster::{DepthMap, Image};
