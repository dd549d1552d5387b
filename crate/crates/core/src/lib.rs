//! Image restoration with learned fidelity and regularization terms.
//!
//! A restorer is a fixed number of gradient-descent stages. Each stage filters
//! the current residual `A x - y` and the current estimate `x` with banks of
//! unit-norm DCT-parameterized filters, passes the responses through learned
//! Gaussian-RBF influence functions, and takes one descent step. Stage
//! parameters are trained greedily and then jointly by backpropagating through
//! the unrolled chain.

pub mod autograd;
pub mod degradation;
pub mod error;
pub mod grid;
pub mod influence;
pub mod io;
pub mod loss;
pub mod model;
pub mod rng;
pub mod trainer;

pub use error::{Result, SfarlError};
pub use grid::{Filter, Image};
