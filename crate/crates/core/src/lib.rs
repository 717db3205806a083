//! Haze synthesis, augmentation, frequency priors, networks and training
//! for single-image dehazing.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod discriminator;
pub mod error;
pub mod eval;
pub mod freq;
pub mod generator;
pub mod glda;
pub mod haze;
pub mod image;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod saca;
pub mod scenes;
pub mod train;

pub use config::{RunConfig, Toggles};
pub use error::{DehazeError, Result};
pub use image::Image;
pub use train::{ModelState, Pool};
