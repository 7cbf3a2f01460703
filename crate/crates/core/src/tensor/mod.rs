//! Dense tensors with reverse-mode differentiation.

mod dense;
pub(crate) mod linalg;
pub mod nn;
pub mod ops;
pub mod optim;
pub mod params;
mod tape;

pub use dense::DenseTensor;
pub use nn::{NormMode, RunningStats};
pub use ops::Reduce;
pub use optim::{lr_schedule, AdamW, AdamWConfig};
pub use params::{ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
