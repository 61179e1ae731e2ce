//! Spatiotemporal predictive pre-training of a ViT encoder on video frame
//! pairs, with frozen-feature probing and behavior cloning downstream.

pub mod cli;
pub mod config;
pub mod data;
pub mod decoders;
pub mod downstream;
pub mod encoder;
mod error;
pub mod model;
pub mod nn;
pub mod numerics;
pub mod patching;
pub mod rng;
pub mod training;
pub mod viz;

pub use error::{Error, Result};
