//! Sparse 4D convolutional action recognition on human point cloud
//! sequences.
//!
//! The crate is generic over the scalar type (`f32` or `f64`); the aliases
//! below name the common instantiations.

// `!(x > 0)` is the NaN-rejecting form used by the argument checks.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod frame;
pub mod geometry;
pub mod gradcheck;
pub mod layers;
pub mod model;
pub mod sampling;
pub mod scalar;
pub mod sparse;
pub mod tensor;
pub mod tnet;
pub mod tracking;

pub use error::{Error, Result};
pub use frame::{Image, InstanceMask, PersonSequence, PointFrame};
pub use model::{ModelConfig, ModelInput, Network, PersonInput, SpHpConvoT};
pub use scalar::Scalar;
pub use tensor::{DenseTensor, ParamStore, Tape, Var};

pub type Tensor32 = DenseTensor<f32>;
pub type Tensor64 = DenseTensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
pub type Network32 = Network<f32>;
pub type Network64 = Network<f64>;
pub type PointFrame32 = PointFrame<f32>;
pub type PointFrame64 = PointFrame<f64>;
