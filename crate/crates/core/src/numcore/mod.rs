//! Dense tensors, a reverse-mode tape and a finite-difference checker.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{finite_diff_check, finite_diff_check_filtered, relative_error, GradCheckReport, REL_FLOOR};
pub use tape::{softmax, BackwardCtx, BackwardFn, Gradients, ParamVars, Params, Tape, Var};
pub use tensor::Tensor;
