//! Command-line front end for the mosaic diffusion experiments.

pub mod commands;
pub mod config;
pub mod ppm;
