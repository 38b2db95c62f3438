//! Core of a two-stage, clue-injected radiology report generator.
//!
//! Everything in this crate is pure computation over `alloc` types: a small
//! reverse-mode autodiff engine, the encoders, contrastive alignment, clue
//! injection, cross-modal clue interaction, the report decoder, the synthetic
//! corpus generator and the evaluation metrics. File formats, the CLI and
//! the training drivers live in the `trrg` crate.
#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod align;
pub mod autodiff;
pub mod checks;
pub mod clue;
pub mod config;
pub mod corpus;
pub mod decoder;
pub mod encoders;
mod error;
pub mod gradcheck;
pub mod interaction;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod real;
pub mod tensor;
pub mod vocab;

pub use autodiff::{Graph, OpKind, Var};
pub use config::ModelConfig;
pub use error::{Error, Result};
pub use params::{ParamId, ParamStore};
pub use real::Real;
pub use tensor::Tensor;
