//! Simulation and multi-frame reconstruction for uncooled microbolometer
//! cameras: joint estimation of per-pixel gain and offset, per-frame
//! geometric transforms and the latent scene radiance.

pub mod diffengine;
pub mod error;
pub mod geometry;
pub mod image;
pub mod io;
pub mod metrics;
pub mod optim;
pub mod scene;
pub mod sensor;
pub mod solver;
pub mod synth;

pub use error::{Error, Result};
pub use image::Image;
