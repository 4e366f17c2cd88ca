//! Bilevel optimization with implicit-function-theorem hypergradients and
//! Kronecker-factored inverse-curvature solvers.
//!
//! The crate is organised bottom-up:
//!
//! * [`nn`] is a small fully-connected network with per-example
//!   pre-activation gradients.
//! * [`curvature`] estimates KFAC/EKFAC factors and exposes dense GGN oracles.
//! * [`solvers`] turns a curvature operator into an approximate inverse-vector
//!   product and scores approximate inverses.
//! * [`bilevel`] assembles hypergradients and runs the double loop.
//! * [`tasks`] holds the concrete problems (linear-regression diagnostic,
//!   quadratic toys, data hypercleaning).

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bilevel;
pub mod container;
pub mod curvature;
pub mod error;
pub mod nn;
pub mod rng;
pub mod solvers;
pub mod tasks;

pub use error::{Error, Result};

pub type Mat = nalgebra::DMatrix<f64>;
pub type Vector = nalgebra::DVector<f64>;
