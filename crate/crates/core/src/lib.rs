//! Voxel-anchored progressive Gaussian-splatting SLAM.
//!
//! The crate is organized around the stages of the pipeline:
//!
//! - [`geometry`]: rigid-body math (SE(3) poses, twists) and pinhole projection.
//! - [`img`]: float image buffers and PNG I/O.
//! - [`voxel`]: multi-resolution spatial-hash voxel map with anchor bookkeeping.
//! - [`field`]: anchors, decoder MLPs, and the anchor -> neural-Gaussian decode
//!   path with analytic gradients.
//! - [`render`]: CPU splat rasterizer, mapping loss, and its backward pass.
//! - [`submap`]: progressive submap lifecycle, optimization, serialization.
//! - [`tracker`]: coarse-to-fine camera tracking (photometric + robust voxel ICP).
//! - [`loop_closure`]: descriptors, loop detection, pose-graph optimization,
//!   correction propagation, and distillation-based submap fusion.
//! - [`dataset`] / [`synth`]: sequence loading and the synthetic RGB-D generator.
//! - [`metrics`]: ATE / PSNR / SSIM / depth-L1 evaluation.
//! - [`config`] / [`pipeline`]: run configuration and end-to-end orchestration.

pub mod adam;
pub mod config;
pub mod dataset;
pub mod field;
pub mod geometry;
pub mod img;
pub mod loop_closure;
pub mod metrics;
pub mod pipeline;
pub mod render;
pub mod ssim;
pub mod submap;
pub mod synth;
pub mod tracker;
pub mod voxel;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("image error on {path}: {message}")]
    Image { path: String, message: String },
    #[error("parse error in {context}: {message}")]
    Parse { context: String, message: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("degenerate view direction: anchor coincides with camera center")]
    DegenerateViewDirection,
    #[error("submap {0} is inactive")]
    SubmapInactive(u64),
    #[error("pose graph is disconnected: components {0:?}")]
    DisconnectedGraph(Vec<Vec<usize>>),
    #[error("{0}")]
    Invalid(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(context: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            context: context.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
