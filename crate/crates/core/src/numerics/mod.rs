//! Dense tensors, a reverse-mode tape, and the AdamW optimizer.

mod gradcheck;
mod graph;
mod optim;
mod real;
mod tensor;

pub use gradcheck::{
    finite_diff_gradcheck, sample_coords, Coord, CoordResult, GradcheckOptions, GradcheckReport,
};
pub use graph::{Gradients, Graph, Var};
pub use optim::{adamw_step, clip_global_norm, Binding, OptimConfig, ParamId, ParamSet, Parameter};
pub use real::Real;
pub use tensor::Tensor;
