//! Scalable Gaussian process regression and classification built on
//! state-space Matérn kernels, additive and projection-pursuit structure,
//! and Kronecker grids.

#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod kernels;
pub mod linalg;

pub use error::{GpError, Result};
pub use kernels::{Discretization, Hyperparameters, Kernel, MaternOrder, StateSpaceModel};
pub mod additive;
pub mod bench;
pub mod classify;
pub mod gridgp;
pub mod io;
pub mod metrics;
pub mod optim;
pub mod oracle;
pub mod ppgpr;
pub mod statespace;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/kernels.md")]
    mod kernels {}
    #[doc = include_str!("../../../book/src/statespace.md")]
    mod statespace {}
    #[doc = include_str!("../../../book/src/additive.md")]
    mod additive {}
    #[doc = include_str!("../../../book/src/projection.md")]
    mod projection {}
    #[doc = include_str!("../../../book/src/classification.md")]
    mod classification {}
    #[doc = include_str!("../../../book/src/grids.md")]
    mod grids {}
    #[doc = include_str!("../../../book/src/command-line.md")]
    mod command_line {}
    #[doc = include_str!("../../../book/src/benchmarks.md")]
    mod benchmarks {}
}
