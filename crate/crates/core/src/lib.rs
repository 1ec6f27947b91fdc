//! Video semantic segmentation with multi-stream and recurrent encoder fusion.
//!
//! The crate is self-contained: a small reverse-mode autodiff engine
//! ([`autodiff`]), a residual feature-pyramid encoder ([`encoder`]), the two
//! temporal fusion mechanisms ([`fusion`]), the four assembled architectures
//! ([`model`]), a synthetic moving-shapes video benchmark ([`data`]), and the
//! training/evaluation harness ([`train`], [`metrics`]).

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod layers;
pub mod mask;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod train;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use mask::LabelMask;
pub use params::{ParamId, ParamStore, Parameter};
pub use rng::Rng;
pub use tensor::{Real, Shape4, Tensor};
