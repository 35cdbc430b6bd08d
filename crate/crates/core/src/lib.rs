//! Diffusion noise features (DNF) for detecting generated images.
//!
//! An image is inverted through a deterministic DDIM process with a noise
//! predictor; the noise estimates collected along the way are fused into a
//! feature map that a small classifier separates into real and generated.

pub mod analysis;
pub mod config;
pub mod container;
pub mod dataset;
pub mod detector;
pub mod diffusion;
pub mod dnf;
pub mod error;
pub mod experiment;
pub mod fsutil;
pub mod hash;
pub mod imageio;
pub mod modelfile;
pub mod nn;
pub mod perturb;
pub mod predictor;
pub mod protocol;
pub mod schedule;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
