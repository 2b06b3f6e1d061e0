//! Prompt-aware adaptive elastic weight consolidation (PA-EWC) on a toy
//! prompt-conditioned segmentation network.
//!
//! The numeric core ([`tensor`], [`autodiff`], [`gradcheck`], [`model`],
//! [`objectives`], [`optim`]) is generic over [`Scalar`]; experiments run in
//! `f64` through the aliases below.

pub mod autodiff;
pub mod classifier;
pub mod error;
pub mod experiment;
pub mod fisher;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod prompts;
pub mod scalar;
pub mod seed;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use scalar::Scalar;

/// Scalar type used by training and experiments.
pub type Real = f64;
pub type Tensor = tensor::Tensor<Real>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type Tape64 = autodiff::Tape<Real>;
pub type ParamStore64 = model::ParamStore<Real>;
