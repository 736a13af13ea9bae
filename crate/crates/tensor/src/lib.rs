//! Dense NHWC tensors, a reverse-mode tape covering the operators a neural cellular
//! automaton needs, Adam, and seeded random streams.
//!
//! Everything is generic over [`Scalar`] (`f32` or `f64`); the aliases at the bottom
//! name the two instantiations used in practice.

pub mod adam;
mod error;
pub mod graph;
pub mod kernels;
pub mod numcheck;
pub mod rng;
pub mod sample;
mod scalar;
mod shape;
mod tensor;

pub use adam::{AdamConfig, AdamOutcome, AdamState};
pub use error::{Result, TensorError};
pub use graph::{sigmoid, Graph, Var};
pub use kernels::norm::NormKind;
pub use rng::{Purpose, RngStream};
pub use sample::{bernoulli, gaussian, sample, Distribution};
pub use scalar::Scalar;
pub use shape::Shape;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;
