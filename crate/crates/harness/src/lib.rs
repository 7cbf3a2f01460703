//! Desk-scale harness around `convot-core`: synthetic action data,
//! sequence files, the preprocessing pipeline, training, evaluation and
//! throughput measurement.

pub mod bench;
pub mod data;
pub mod error;
pub mod imageio;
pub mod preprocess;
pub mod seqfile;
pub mod synth;
pub mod train;

pub use error::{Error, Result};

use convot_core::model::ModelConfig;
use convot_core::tnet::TNetWidths;

/// The reduced network used for synthetic-data training: the layer
/// structure of the full model with narrower channels and smaller kernels.
pub fn desk_config() -> ModelConfig {
    ModelConfig {
        frames: 32,
        points: 512,
        grid: 32,
        classes: 5,
        parts: true,
        tnet: TNetWidths {
            point: [16, 32, 64],
            global: [32, 16],
        },
        conv1: 16,
        conv1_extent: [3; 4],
        conv2: 32,
        conv2_extent: [1, 3, 3, 3],
        bottleneck1: (16, 64),
        bottleneck2: (32, 128),
        ..ModelConfig::default()
    }
}
