//! Two-stage gun detection in video: a frame-feature backbone with a sequence
//! head decides whether a clip contains a gun, and a grid detector localizes
//! it in the clips that pass.

pub mod augment;
pub mod backbone;
pub mod boxes;
pub mod checkpoint;
pub mod classifier;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod detector;
pub mod error;
pub mod frame;
pub mod gradcam;
pub mod metrics;
pub mod pipeline;
pub mod provenance;
pub mod render;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
pub use gunsight_autograd as autograd;
