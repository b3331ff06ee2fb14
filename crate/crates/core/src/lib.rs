//! Slide-level vision-language modelling on tile-embedding bags.
//!
//! A latent-resampling slide encoder with weight-shared cross-attention and
//! a reused key/value cache, a causal report decoder with a contrastive CLS
//! pathway, the joint contrastive + captioning objective, and the zero-shot,
//! linear-probe and fine-tuning evaluation modes.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autograd;
pub mod bytes;
pub mod config;
pub mod corpus;
pub mod decoder;
pub mod embed;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod layers;
pub mod model;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod rng;
pub mod selftest;
pub mod tensor;
pub mod text;
pub mod tiling;
pub mod train;

pub use autograd::{Gradients, Graph, Mask, Reduction, Var};
pub use error::{Error, Result};
pub use params::{ParamId, ParamStore};
pub use tensor::{Real, Tensor};
