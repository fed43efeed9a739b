//! Road surface elevation reconstruction in bird's-eye view.

pub mod ablation;
pub mod autodiff;
pub mod config;
pub mod elevation_grid;
pub mod error;
pub mod geometry;
pub mod heads;
pub mod io;
pub mod metrics;
pub mod seeds;
pub mod synthetic;
pub mod training;
pub mod voxel_engine;

pub use error::{Error, Result};

/// Identifier written next to every run's outputs.
pub const VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));
