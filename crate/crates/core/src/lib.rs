//! Emotion and speaker conditioning for expressive speech synthesis, at desk
//! scale.
//!
//! Everything is built on a small `f64` reverse-mode autodiff core
//! ([`autodiff`]) and exercised against a synthetic corpus whose speaker and
//! emotion factors are planted, so every recovery or disentanglement claim has
//! an exact ground truth.

pub mod autodiff;
pub mod disentangle;
pub mod conditioning;
pub mod encoders;
pub mod flowmatch;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod optim;
pub mod rng;
pub mod synthdata;
pub mod tensor;

pub use autodiff::{Gradients, Graph, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
