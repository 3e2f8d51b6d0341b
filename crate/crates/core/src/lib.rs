//! SURF-GAN: a subspace-modulated radiance-field generator, its adversarial
//! trainer, and the distillation of its pose control into a 2D style-based
//! generator.

pub mod error;
pub mod adapters;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod discriminator;
pub mod evaluation;
pub mod generator;
pub mod geometry;
pub mod injection;
pub mod metrics;
pub mod nn;
pub mod training;

pub use error::{AdapterError, Error, Result};
