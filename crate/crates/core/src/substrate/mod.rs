//! Differentiable numerical core: tensors, a reverse-mode tape, layer
//! primitives, Adam, finite-difference checking and checkpoints.

pub mod adam;
pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod params;
pub mod tensor;

pub use adam::{adam_step, AdamConfig};
pub use checkpoint::{load_checkpoint, restore_into, save_checkpoint};
pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{Graph, NodeGrads, Var};
pub use layers::{log_softmax, lstm_forward, Linear, LstmStack, LstmState, LstmWeights};
pub use params::{Gradients, ParamId, Parameter, ParameterSet};
pub use tensor::Tensor;
