//! Hybrid variational autoencoder: a joint generative model `p(d, h)` of
//! images `d` and continuous labels `h`, trained from a mix of labeled pairs
//! and unlabeled images.

#![allow(clippy::should_implement_trait, clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod cli;
pub mod config;
pub mod data;
pub mod depth;
pub mod error;
pub mod eval;
pub mod gaussian;
pub mod nn;
pub mod noise;
pub mod objectives;
pub mod tensor;
pub mod train;
pub mod verify;

pub use autodiff::{Primitive, Tape, Var};
pub use config::ExperimentConfig;
pub use data::{SceneConfig, SemiDataset};
pub use error::{Error, Result};
pub use gaussian::DiagGaussian;
pub use nn::{ModelDims, ModelParams, NetworkSpecs};
pub use objectives::EstimatorConfig;
pub use tensor::Tensor;
pub use train::{Checkpoint, Mode, TrainConfig};
