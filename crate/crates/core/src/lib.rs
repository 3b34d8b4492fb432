//! Multi-class-token transformer for weakly supervised dense localization,
//! at desk scale: a miniature encoder with one class token per class is
//! trained on synthetic multi-label images; class-to-patch attention maps
//! become class-specific localization maps, refined by patch-to-patch
//! affinity and fused with patch-token CAM maps, then scored against pixel
//! ground truth.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod heads;
pub mod maps;
pub mod mct1;
pub mod metrics;
pub mod pipeline;
pub mod tensor;
pub mod train;

pub use config::{ModelConfig, Pooling};
pub use error::{MctError, Result};
pub use graph::{Gradients, Graph, Var};
pub use tensor::Tensor;
