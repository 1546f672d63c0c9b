//! Face parsing with learnable class-specific tokens.
//!
//! The crate is organized bottom-up: [`numerics`] provides tensors and
//! reverse-mode gradients; [`backbone`], [`fusion`], [`decoder`] and [`head`]
//! build the network; [`objective`], [`train`] and [`metrics`] cover
//! optimization and evaluation; [`data`] renders and loads datasets;
//! [`config`] ties everything into one run configuration.

pub mod backbone;
pub mod config;
pub mod data;
pub mod decoder;
pub mod error;
pub mod fusion;
pub mod gradcheck_suite;
pub mod head;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod objective;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
