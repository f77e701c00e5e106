pub mod affordance;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod cvae;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod explorer;
pub mod image;
pub mod nn;
pub mod prior;
pub mod seed;
pub mod simenv;
pub mod vqvae;

pub use error::{Error, Result};
pub use image::Image;
