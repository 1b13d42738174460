//! Intent-conditioned trajectory prediction for vehicles in parking lots.

pub mod ekf;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod intent;
pub mod map;
pub mod nn;
pub mod pipeline;
pub mod plot;
pub mod raster;
pub mod scene;
pub mod traj;
pub mod training;
pub mod trunk;

pub use error::{Error, Result};
