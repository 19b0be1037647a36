//! World-model policy library.
//!
//! A single latent world model predicts future observation latents and an
//! action chunk jointly, trained with conditional flow matching over a fused
//! token sequence. The crate is self-contained: a tape-based reverse-mode
//! autodiff core ([`numerics`]), a patch encoder ([`encoder`]), adaptive
//! attention pooling ([`pooling`]), the flow-matching objective and sampler
//! ([`flowmatch`]), the joint sequence model ([`generator`], [`model`]), a
//! kinematic tabletop simulator ([`envsim`]), training ([`train`]) and the
//! analysis drivers ([`analysis`]).

pub mod analysis;
pub mod config;
pub mod container;
pub mod encoder;
pub mod envsim;
pub mod error;
pub mod flowmatch;
pub mod generator;
pub mod model;
pub mod numerics;
pub mod pooling;
pub mod probes;
pub mod rng;
pub mod train;

pub use error::{OwmError, Result};
