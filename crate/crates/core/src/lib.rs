//! Set Distribution Networks: a generative model over sets of images.
//!
//! A set of images is summarised by a binary code `z`; an energy model scores
//! images given `z`, a generator samples new members of the set, and an
//! autoregressive prior models the codes themselves.

pub mod checkpoint;
pub mod config;
pub mod data;
mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod trainer;
pub mod workflows;

pub use config::{DataSource, TrainConfig};
pub use error::{Error, Result};
