//! 4D sparse voxel tensors and the layers that operate on them.

pub mod blocks;
pub mod conv;
pub mod coord;
pub mod pool;
pub mod tensor;
pub mod voxel;

pub use blocks::{Bottleneck, ConvBnRelu, MsTcn};
pub use conv::{kernel_offsets, Rulebook, SubmConv};
pub use coord::{Coord4, CoordIndex};
pub use pool::{PoolPlan, PoolSpec};
pub use tensor::{SparseLayout, SparseTensor, SparseVar};
pub use voxel::{voxel_index, voxelize_points, RowPlacement};
