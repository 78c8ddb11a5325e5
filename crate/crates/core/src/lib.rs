//! Generator inversion and pivotal tuning on a procedurally rendered face world.

pub mod checkpoint;
pub mod datagen;
pub mod editing;
pub mod error;
pub mod gan;
pub mod image;
pub mod inversion;
pub mod metrics;
pub mod nn;
pub mod perceptual;
pub mod pivotal;
pub mod seed;
pub mod training;

pub use error::{Error, Result};
pub use image::ImageTensor;
