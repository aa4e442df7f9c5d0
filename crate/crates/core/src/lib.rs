//! Hybrid CNN-transformer segmentation network.

pub mod attention_gates;
pub mod checkpoint;
pub mod config;
pub mod conv_blocks;
pub mod data;
pub mod encoder;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod train;
pub mod verify;

pub use config::{AblationFlags, ModelConfig};
pub use error::{Error, Result};
pub use metrics::{evaluate_masks, MetricsReport};
pub use model::{build_model, Model};
pub use train::{train, TrainConfig};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/architecture.md")]
    mod architecture {}
    #[doc = include_str!("../../../book/src/attention_gates.md")]
    mod attention_gates {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../README.md")]
    mod readme {}
}
