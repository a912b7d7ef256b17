pub mod attention;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod encoder;
pub mod error;
pub mod experiment;
pub mod geometry;
pub mod image;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod rng;
pub mod synth;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
