//! Laboratory for latent diffusion transformers.
//!
//! * [`linalg`]: dense matrices, Kronecker and face-splitting products, norms.
//! * [`subspace`]: data on a linear latent subspace and the noising kernel.
//! * [`score`]: closed-form mixture scores and the on/off-support split.
//! * [`network`]: the transformer score network with manual backprop.
//! * [`attention`]: exact and low-rank attention inference and gradients.
//! * [`diffusion`]: score-matching training, reverse-SDE sampling, metrics.
//! * [`ua`]: the constructive universal-approximation pipeline.
//! * [`bench`] and [`cli`]: benchmarks, sweeps, configuration and artifacts.

// `!(x > 0.0)` is how NaN gets rejected together with nonpositive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attention;
pub mod cli;
pub mod bench;
pub mod diffusion;
pub mod error;
pub mod linalg;
pub mod network;
pub mod rng;
pub mod score;
pub mod subspace;
pub mod ua;

pub use error::{Error, Result};
pub use linalg::{DenseMatrix, LowRankFactors, NormKind};
