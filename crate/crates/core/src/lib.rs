//! Multi-receptive-field non-local dehazing network.
//!
//! The crate carries its own small tensor library with reverse-mode autodiff
//! ([`autodiff`]), the dehazing blocks ([`blocks`], [`nonlocal`]), the
//! three-level network ([`net`]), synthetic haze data ([`haze`]), the
//! contrastive losses ([`losses`]), metrics and cost accounting
//! ([`metrics`], [`cost`]) and the training loop ([`train`]).

pub mod autodiff;
pub mod blocks;
pub mod checkpoint;
pub mod config;
pub mod cost;
pub mod data;
pub mod error;
pub mod exec;
pub mod haze;
pub mod image_io;
pub mod kernels;
pub mod losses;
pub mod metrics;
pub mod net;
pub mod nn;
pub mod nonlocal;
pub mod optim;
pub mod tensor;
pub mod train;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use nn::{ConvSpec, ParamStore};
pub use tensor::{Real, Tensor};
