//! Physics-constrained volumetric precipitation retrieval.
//!
//! The crate covers the full desk-scale pipeline: gridded field types and a
//! tensor container ([`fields`], [`tensorfile`]), hydrostatic layer PWV
//! ([`pwv`]), KD-tree collocation ([`collocate`]), a synthetic forward model
//! ([`synthgen`]), the multi-term loss ([`losses`]), an encoder / attention
//! bottleneck / decoder network on a small reverse-mode autodiff engine
//! ([`autodiff`], [`model`]), training and ablation ([`train`]) and
//! verification metrics ([`evaluate`]).

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod collocate;
pub mod losses;
pub mod model;
pub mod error;
pub mod evaluate;
pub mod fields;
pub mod pwv;
pub mod synthgen;
pub mod tensor;
pub mod tensorfile;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
