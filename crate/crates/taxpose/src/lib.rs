//! Task-specific cross-pose estimation between segmented point clouds.
//!
//! Given point clouds of an "action" and an "anchor" object, the model
//! predicts dense soft correspondences across the two clouds and extracts
//! the rigid transform that places the action object in a task-specific
//! pose relative to the anchor, via a weighted Procrustes solve that is
//! differentiated end to end.
//!
//! The numeric core is generic over the scalar type ([`Scalar`]: `f32` or
//! `f64`); the crate root exports `f64` aliases, which every tool and test
//! in this workspace uses.

pub mod autodiff;
pub mod error;
pub mod geometry;
pub mod io;
pub mod losses;
pub mod mat3;
pub mod model;
pub mod pretrain;
pub mod procrustes;
pub mod scalar;
pub mod symmetry;
pub mod tasks;
pub mod train;

pub use error::{Error, Result};
pub use scalar::{Real, Scalar};

/// Concrete 64-bit aliases for the core types.
pub type Vec3 = geometry::Vec3<f64>;
pub type RotationMatrix = geometry::RotationMatrix<f64>;
pub type RigidTransform = geometry::RigidTransform<f64>;
pub type PointCloud = geometry::PointCloud<f64>;











