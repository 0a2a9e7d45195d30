//! Core 3D types, rigid transforms, voxel quantization, nearest-neighbour
//! search, registration noise and PLY I/O.

mod cloud;
mod kdtree;
mod perturb;
pub mod ply;
mod pose;
mod voxel;

pub use cloud::{ChangeClass, Point, PointCloud};
pub use kdtree::{nearest_neighbor, KdTree};
pub use perturb::{perturb_pose, perturb_pose_stream, PerturbationSpec};
pub use ply::{load_ply, read_ply, save_ply, to_ply_bytes, write_ply, PlyFormat};
pub use pose::{hat, so3_exp, transform, Pose};
#[allow(unused_imports)]
pub(crate) use voxel::check_voxel_size;
pub use voxel::{quantize, VoxelGrid, VoxelIndex};
