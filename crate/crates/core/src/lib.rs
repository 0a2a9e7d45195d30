//! Online LiDAR change detection and long-term map maintenance.

pub mod augment;
pub mod config;
pub mod confidence;
pub mod detect;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod mapping;
pub mod mapupdate;
pub mod rng;
pub mod synthscene;

pub use error::{Error, Result};
pub use geometry::{ChangeClass, KdTree, Point, PointCloud, Pose, PerturbationSpec, VoxelGrid, VoxelIndex};
