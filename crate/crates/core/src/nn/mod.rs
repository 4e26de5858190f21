//! Dense tensors, layer graphs with reverse-mode differentiation, and Adam.

pub mod adam;
pub mod graph;
pub mod kernels;
pub mod tensor;

pub use adam::AdamState;
pub use graph::{
    InputSlot, LayerKind, Mode, Network, NetworkSpec, Node, OutputSlot, ParamInfo, ParamStore,
};
pub use tensor::Tensor;
