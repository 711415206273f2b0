//! Proposal refinement for two-stage 3-D object detection: multi-scale ROI
//! pooling from sparse voxel features, vertex-aware position encoding,
//! vector attention, and IoU-supervised detection heads, on a small
//! reverse-mode tensor core.

// `!(x > 0.0)` rejects NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod alloc;
pub mod config;
pub mod geometry;
pub mod harness;
pub mod heads;
pub mod model;
pub mod rfe;
pub mod tensor;
pub mod voxel;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] tensor::TensorError),
    #[error(transparent)]
    Geometry(#[from] geometry::GeometryError),
    #[error(transparent)]
    Voxel(#[from] voxel::VoxelError),
    #[error(transparent)]
    Scene(#[from] voxel::scene::SceneError),
    #[error(transparent)]
    Checkpoint(#[from] tensor::checkpoint::CheckpointError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("config: {0}")]
    Config(String),
    #[error("contract: {0}")]
    Contract(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/tensor.md")]
    mod tensor {}
    #[doc = include_str!("../../../book/src/geometry.md")]
    mod geometry {}
    #[doc = include_str!("../../../book/src/voxels.md")]
    mod voxels {}
    #[doc = include_str!("../../../book/src/attention.md")]
    mod attention {}
    #[doc = include_str!("../../../book/src/heads.md")]
    mod heads {}
    #[doc = include_str!("../../../book/src/harness.md")]
    mod harness {}
}
