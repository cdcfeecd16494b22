//! Small reverse-mode autodiff engine with the pieces the models need:
//! LSTM cells, affine projections, dropout, Adam and checkpoints.

pub mod checkpoint;
pub mod graph;
pub mod layers;
pub mod optim;
pub mod params;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use graph::{log_sum_exp, sigmoid, Graph, NodeId};
pub use layers::{dropout, log_softmax, softmax, Affine, LstmLayer};
pub use optim::{adam_update, AdamConfig, OptimizerState};
pub use params::{Gradients, ParamId, ParameterSet, Partition};
pub use tensor::Tensor;
