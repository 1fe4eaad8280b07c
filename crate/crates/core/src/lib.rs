//! Back-end of a two-stage 6-DoF object pose pipeline.
//!
//! The front-end (a heatmap CNN) is replaced by a synthetic simulator; this
//! crate covers everything after it:
//!
//! - [`heatmap`]: 8-channel projection heatmaps, peak extraction, the
//!   per-channel argmax grouping baseline and the false-selection metric.
//! - [`pgm`]: the learned projection-grouping network that picks one peak per
//!   channel using cross-channel correlation.
//! - [`pipeline`]: hypothesis pools sampled around the selected peaks and the
//!   end-to-end estimator.
//! - [`corrnet`]: the correspondence-evaluation set network that weights
//!   2D-3D hypotheses, trained with a classification + reprojection loss.
//! - [`solver`]: weighted DLT, its weight gradient, pose decomposition and a
//!   RANSAC baseline.
//! - [`metrics`], [`datagen`], [`geom`]: evaluation, synthetic data and the
//!   shared geometric types.
//! - [`nnet`]: the small dense/set-network kernel both networks are built on.
//!
//! All geometry is `f64`; heatmap confidences are `f32`.

pub mod corrnet;
pub mod datagen;
mod error;
pub mod geom;
pub mod heatmap;
pub mod metrics;
pub mod nnet;
pub mod pgm;
pub mod pipeline;
pub mod rng;
pub mod solver;

pub use error::{Error, Result};
pub use geom::{project, CameraIntrinsics, CornerSet, Correspondence2D3D, Pose, Vec2, Vec3};
pub use heatmap::{HeatmapStack, NUM_CHANNELS};
pub use solver::ProjectionMatrix;
