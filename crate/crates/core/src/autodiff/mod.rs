//! Reverse-mode automatic differentiation over a recorded tape.

pub mod check;
pub mod graph;
pub mod special;
pub mod tensor;

pub use check::{finite_difference_check, FdReport, DEFAULT_FD_STEP};
pub use graph::{GradientMap, Graph, ParamMap, Var};
pub use special::{digamma, ln_gamma, trigamma};
pub use tensor::Tensor;
