//! Zero-shot all-in-one image restoration with a diffusion prior, a
//! degradation model learned at test time, and staged guidance.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// Index loops read more plainly in the tensor kernels.
#![allow(clippy::needless_range_loop)]

pub mod degrade;
pub mod diffusion;
pub mod error;
pub mod gradtape;
pub mod harness;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod tdg;
pub mod tdm;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Shape, Tensor};
