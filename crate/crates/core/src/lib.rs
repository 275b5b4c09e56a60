#![allow(clippy::needless_range_loop)]

pub mod dataset;
pub mod diffusion;
pub mod error;
pub mod model;
pub mod numerics;
pub mod theory;
pub mod train;

pub use error::{Error, Result};
