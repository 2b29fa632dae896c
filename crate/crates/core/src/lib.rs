//! Recommendation losses, their bound chains, closed-form linear solvers and
//! a matrix-factorization trainer.
//!
//! Numerical code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below pin the common instantiations.

pub mod bounds;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod linalg;
pub mod linear;
pub mod losses;
pub mod model;
pub mod sampling;
pub mod trainer;
pub mod scalar;
pub mod seed;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Matrix = linalg::DenseMatrix<f64>;
pub type Matrix32 = linalg::DenseMatrix<f32>;
pub type Batch = losses::ScoreBatch<f64>;
pub type Batch32 = losses::ScoreBatch<f32>;
pub type Loss = losses::LossSpec<f64>;
pub type Loss32 = losses::LossSpec<f32>;
pub type Model = model::MfModel<f64>;
pub type Model32 = model::MfModel<f32>;
