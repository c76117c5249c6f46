//! The multiscale dense network: configuration, layer graph, forward pass
//! and checkpoints.

mod checkpoint;
mod config;
mod forward;
mod graph;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, Checkpoint, Record, RecordRole};
pub use config::{ModelConfig, DENSE_STAGES};
pub use forward::ForwardPass;
pub use graph::{
    build_msadnet, receptive_extent, Branch, GraphBuilder, GraphNode, LayerKind, LayerSpec, ModelGraph,
    NamedTensor, NodeId,
};
