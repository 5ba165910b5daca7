//! The differentiable classifier: architecture description, forward pass with
//! feature taps, backpropagation, parameter snapshots and checkpoints.

mod checkpoint;
mod network;
mod ops;
mod spec;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest};
pub use network::{ForwardResult, Network, ParamsSnapshot, TapGrads};
pub use spec::{Activation, ConvLayerSpec, ConvNetSpec, LayerShapes, Pool};
