//! Dense tensors, differentiation tape, gradient checking and AdamW.

pub mod gradcheck;
pub mod kernels;
mod optim;
mod rng;
mod scalar;
mod tape;
mod tensor;

pub use gradcheck::{gradcheck, gradcheck_with_hook, GradcheckOptions, GradcheckReport, Probe};
pub use optim::{adamw_step, AdamWState};
pub use rng::SeededRng;
pub use scalar::{Precision, Scalar};
pub use tape::{Binary, Gradients, Graph, ReduceKind, Unary, Var};
pub use tensor::{BitPattern, Tensor};
