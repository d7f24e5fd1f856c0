//! Dynamic cloudy-sky environment maps from a single fisheye sky image.

pub mod cli;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod neural;
pub mod optical_flow;
pub mod sky_image;
pub mod sphere_map;
pub mod temporal_engine;

pub use error::{Error, Result};
