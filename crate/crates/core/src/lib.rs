//! Geometry for pose refinement with a dynamic projective spatial transformer.
//!
//! The pipeline has four stages:
//!
//! 1. **Reconstruction** – space-carve a voxel reference feature from a few
//!    posed reference images ([`reconstruction`]).
//! 2. **Grid generation** – turn camera intrinsics, a bounding box and a pose
//!    into a cone-beam sampling grid localized around the object in object
//!    space ([`grid`]).
//! 3. **Projection** – trilinearly sample the feature with the grid and keep
//!    the nearest non-empty sample per ray ([`projector`]).
//! 4. **Refinement** – optimize the disentangled 9-parameter pose update
//!    against a grid-matching or image-matching objective ([`objectives`],
//!    [`refiner`]).
//!
//! Object space is normalized so the object fits the unit ball (diameter 2).
//! The camera looks along `-z` with the image plane at `z = -f`, `+x` right and
//! `+y` down; see [`pose::Convention`] for converting other conventions.

pub mod dataset;
pub mod error;
pub mod grid;
pub mod metrics;
pub mod objectives;
pub mod pose;
pub mod projector;
pub mod raster;
pub mod reconstruction;
pub mod refiner;

pub use error::{Error, Result};
pub use grid::{GridStage, RayGrid};
pub use pose::{BoundingBox, CameraIntrinsics, Pose, PoseDelta};
pub use projector::Appearance;
pub use reconstruction::{Observation, ReferenceSet, VoxelFeature};
