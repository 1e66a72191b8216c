//! Dense arrays, reverse-mode differentiation, AdamW and gradient verification.

mod gradcheck;
mod graph;
mod optim;
mod params;
mod tensor;

pub use gradcheck::{finite_difference_check, relative_error, GradCheckOptions, GradCheckReport};
pub use graph::{log_softmax_in_place, softmax_in_place, AttnLayout, Gradients, Graph, Var};
pub use optim::{clip_global_norm, AdamW, AdamWConfig};
pub use params::{ParamGrads, ParamId, ParamStore};
pub use tensor::{Precision, Tensor};
