//! Kernel-basis CNN compression: decomposition, sparse retraining, pruning,
//! structural shrinking and a two-stage sparse inference runtime.

pub mod arch;
pub mod data;
pub mod decompose;
pub mod error;
pub mod graph;
pub mod parallel;
pub mod prune;
pub mod runtime;
pub mod shrink;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{ActShape, Layer, LayerId, Network};
pub use tensor::Tensor;
