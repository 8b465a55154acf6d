//! Desk-scale gradient inversion against a simulated federated-learning
//! client: duplicate-aware label recovery from the last-layer gradient and
//! regularized gradient-matching image reconstruction.

pub mod autodiff;
pub mod error;
pub mod experiment;
pub mod fl;
pub mod imaging;
pub mod labels;
pub mod selftest;
pub mod tea;
pub mod trials;
pub mod victim;

pub use autodiff::{Array, Tensor};
pub use error::{Error, Result};
