//! Co-segmentation attention for video snippets.
//!
//! The crate builds, from scratch, everything needed to study common-saliency
//! attention across video frames at desk scale:
//!
//! - a dense f64 tensor core with tape-based reverse-mode differentiation
//!   ([`tensor`], [`tape`], [`ops`], [`nn`]),
//! - the co-segmentation activation module built on NCC cost volumes
//!   ([`cosam`]) and the salient-region interaction module ([`srim`]),
//! - toy CNN hosts with retrieval and two-branch distillation heads
//!   ([`model`], [`losses`], [`metrics`], [`optim`]),
//! - a deterministic synthetic co-salient video generator ([`synthdata`]),
//! - an analytic parameter/FLOP profiler comparing COSAM against non-local
//!   blocks ([`profiler`]),
//! - file formats and a CLI for training, evaluation, gradient auditing and
//!   mask export ([`io`], [`config`], [`train`]).

pub mod audit;
pub mod config;
pub mod cosam;
pub mod error;
pub mod io;
pub mod layers;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod ops;
pub mod optim;
pub mod profiler;
pub mod rng;
pub mod srim;
pub mod synthdata;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{CosamError, Result};
pub use tape::{grad_check, grad_check_multi, Tape, Var};
pub use tensor::Tensor;
