//! Matrix-free normalized-gradient-field registration of 3D volumes.

pub mod curvature;
pub mod error;
pub mod grid;
pub mod image;
pub mod bench;
pub mod instrument;
pub mod io;
pub mod multilevel;
pub mod ngf;
pub mod optimizer;
pub mod oracle;
pub mod parallel;
pub mod scalar;
pub mod selftest;
pub mod synthetic;
pub mod transfer;

pub use error::{Error, Result};
pub use grid::{Dir, GridDesc, GridKind};
pub use image::{SampledTemplate, Volume};
pub use scalar::Real;

pub type Volume64 = Volume<f64>;
pub type Volume32 = Volume<f32>;
pub type Grid64 = GridDesc<f64>;
pub type Grid32 = GridDesc<f32>;
