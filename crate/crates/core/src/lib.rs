//! Spatio-temporal focus graph convolution for skeleton action recognition.
//!
//! A small reverse-mode autodiff engine drives a six-module graph network
//! whose adjacency is augmented by an instance-dependent term, gradient-based
//! spatio-temporal focus maps, and the focus-guided training objectives.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod focus;
pub mod gradcheck;
pub mod graph;
pub mod network;
pub mod objectives;
pub mod tensor;
pub mod train;

pub use autodiff::{ElementwiseKind, ReduceKind, Tape, Var};
pub use error::{Result, StfError};
pub use graph::{MultiScaleAdjacency, ScaleMode, SkeletonGraph};
pub use network::{ForwardTrace, Model, NetworkConfig};
pub use tensor::{Scalar, Tensor};
