//! Multimodal graph learning laboratory.
//!
//! A small reverse-mode autodiff engine drives mean-aggregation GNNs, a
//! decoupled dual-pathway model ([`supra`]) and its coupled baselines, while
//! [`theory`] provides closed-form SNR and gradient-starvation quantities with
//! Monte Carlo and autodiff cross-checks. [`experiments`] runs the noise sweep,
//! gradient tracking and corruption probe on synthetic graphs from [`graph`].

pub mod aggregation;
pub mod error;
pub mod experiments;
pub mod graph;
pub mod optim;
pub mod params;
pub mod seed;
pub mod sparse;
pub mod supra;
pub mod tape;
pub mod tensor;
pub mod theory;

pub use error::{Error, Result};
pub use tensor::{Tensor, TensorError};
