//! Dense tensors, a reverse-mode autodiff graph, gradient checking, the Adam
//! optimizer and parameter checkpoints.

pub mod gradcheck;
pub mod graph;
pub mod optim;
pub mod params;
pub mod tensor;

pub use gradcheck::{finite_diff_check, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub use optim::{adam_step, AdamConfig, AdamState, NoamSchedule};
pub use params::ParamStore;
pub use tensor::Tensor;
