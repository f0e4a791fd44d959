//! Minimal differentiable building blocks in f64.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod optim;
pub mod params;
pub mod tensor;

pub use graph::{DropoutCtx, Graph, NodeId};
pub use layers::{mlp_forward, transformer_forward, TransformerDims};
pub use optim::{Adam, AdamConfig};
pub use params::{all_partitions, Gradients, ParamEntry, ParamSet, Partition, PartitionSet};
pub use tensor::{matmul, Tensor};
