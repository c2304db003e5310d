//! Point-cloud graph convolutions with geometric attention.
//!
//! The crate is self-contained: a small reverse-mode tensor engine
//! ([`autodiff`]), exact neighbour search ([`spatial`]), per-edge geometry
//! ([`geometry`]), the learned operators ([`layers`]), the assembled network
//! and its training loop ([`model`], [`train`]), and dataset I/O ([`data`]).

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod layers;
pub mod model;
pub mod optim;
pub mod spatial;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
