//! Dense tensors, reverse-mode differentiation, AdamW and the warmup/cosine
//! learning-rate schedule.

mod gradcheck;
mod graph;
mod optim;
mod tensor;

pub use gradcheck::{check_against_differences, finite_difference_check, GradCheckReport, GraphLoss, LossFunction, MAX_COORDS_PER_TENSOR};
pub use graph::{focal_term, focal_term_grad, ComputeGraph, Gradients, Var, LOG_CLAMP};
pub use optim::{AdamWConfig, LrSchedule, OptimizerState, ParamUpdate};
pub use tensor::{gemm, softmax, Element, Tensor};
