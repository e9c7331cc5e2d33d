//! Meta-learned encoder networks whose representations cluster well under
//! variational inference of a truncated Dirichlet-process Gaussian mixture,
//! trained by backpropagating a continuous relaxation of the adjusted Rand
//! index through the unrolled update equations.

pub mod autodiff;
pub mod dataio;
pub mod encoder;
pub mod error;
pub mod metrics;
pub mod parallel;
pub mod rng;
pub mod trainer;
pub mod vb;

pub use autodiff::{finite_difference_check, GradientMap, Graph, ParamMap, Tensor, Var};
pub use error::{Error, Result};
