//! Convolutional network engine: tensors, operators, parameter storage,
//! the landmark backbone and the auxiliary pose branch.

pub mod checkpoint;
pub mod gemm;
pub mod layers;
pub mod model;
pub mod params;
pub mod tensor;

pub use checkpoint::{parameter_count, serialized_size, Checkpoint, CheckpointHeader};
pub use layers::{Activation, Layer, Mode};
pub use model::*;
pub use params::{EntryKind, ParamStore};
pub use tensor::Tensor;
