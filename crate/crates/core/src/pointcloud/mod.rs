//! Point clouds, voxelization, superpoint over-segmentation, and pooling
//! between the two resolutions.

pub mod cloud;
pub mod io;
pub mod pool;
pub mod superpoint;
pub mod voxel;

pub use cloud::PointCloud;
pub use io::{read_scene, write_ply, write_scene, Scene};
pub use pool::{broadcast_rows, broadcast_to_points, pool_rows, pool_to_superpoints};
pub use superpoint::{segment_superpoints, SuperpointPartition};
pub use voxel::{voxelize, Connectivity, VoxelGrid};
