//! Streaming video diffusion at desk scale.

pub mod clock;
pub mod diffusion;
pub mod editor;
pub mod error;
pub mod memory;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod rng;
pub mod svdt;
pub mod tensor;
pub mod train;
pub mod video;

pub use error::{Error, Result};
pub use rng::SeedTree;
pub use tensor::{Gradients, Tape, Tensor};
