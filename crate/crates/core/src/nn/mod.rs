//! Fully-connected networks without biases, plus the two closed-form
//! criteria used throughout (square loss and softmax cross-entropy).
//!
//! Batches are stored column-wise: an input batch is a `dim × N` matrix.
//! Parameters are flattened layer by layer, each weight matrix row-major.

mod criterion;
mod network;

pub use criterion::{softmax, Criterion, CriterionKind, Targets};
pub use network::{Activation, ForwardTrace, GradientBundle, LinearLayer, Network, ParamLayout};
