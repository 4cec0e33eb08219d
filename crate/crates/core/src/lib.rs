//! Desk-scale masked image modelling with multi-level feature fusion.

pub mod analysis;
pub mod autodiff;
pub mod config;
pub mod data;
pub mod error;
pub mod evalkit;
mod fft;
pub mod model;
pub mod nn;
pub mod report;
pub mod rng;
pub mod tensor;
pub mod trainer;

#[cfg(test)]
mod testutil;

pub use autodiff::{grad_check, Gradients, Tape, Var};
pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::Tensor;
