//! Layer-spatial attention over a bank of CNN feature maps.
//!
//! A Conv-LSTM probes an image for a fixed number of steps. At each step a
//! hard, straight-through Gumbel selection picks one feature map from the
//! bank and a soft spatial attention map weights positions inside it.
//!
//! The crate is `no_std` (with `alloc`) when built without the default `std`
//! feature; file formats and the command line live in the `lsattn` crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

mod kernels;

pub mod attention;
pub mod checks;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod gumbel;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use config::Config;
pub use model::Model;
pub use ops::{BatchNormStats, Mode, Padding};
pub use params::{ParamId, ParamStore};
pub use rng::Rng;
pub use tape::{Activation, Gradients, Tape, Var};
pub use tensor::Tensor;
