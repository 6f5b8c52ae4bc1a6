//! Wasserstein introspective networks at desk scale.
//!
//! A single classifier `f_W` is trained against its own synthesized
//! pseudo-negatives with a Wasserstein loss and gradient penalty, then used as
//! a generator by gradient ascent on the input.

pub mod autodiff;
pub mod cascade;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod divergence;
pub mod error;
pub mod image_io;
pub mod metrics;
pub mod nn;
pub mod params;
pub mod run;
pub mod seeds;
pub mod supervised;
pub mod synthesis;
pub mod tensor;
pub mod train;

pub use autodiff::{Graph, Mode, NodeId};
pub use error::{Result, WinnError};
pub use nn::{ArchitectureSpec, Preset};
pub use params::ModelParams;
pub use tensor::Tensor;
