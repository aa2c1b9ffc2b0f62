//! A self-contained numerical workbench for gradient-based transfer attacks
//! on small convolutional networks.
//!
//! The crate is organized around one idea: the forward pass of a network is
//! fixed, but the backward pass is assembled from pluggable per-layer rules
//! ([`rules::BackwardPolicy`]). On top of that sit desk-scale architectures
//! and a trainer ([`models`]), the attack algorithms ([`attacks`]), and an
//! experiment harness ([`experiments`]) that produces CSV transfer reports.

pub mod attacks;
pub mod data;
pub mod error;
pub mod experiments;
pub mod graph;
pub mod models;
pub mod rules;
pub mod tensor;
pub mod testkit;

pub use error::{Error, Result};
pub use tensor::{Tensor, Tensor64, WindowSpec};
