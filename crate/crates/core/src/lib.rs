//! Distortion-aware surface normal estimation for 360° equirectangular images.

pub mod autograd;
pub mod d2n;
pub mod error;
pub mod losses;
pub mod maps;
pub mod metrics;
pub mod net;
pub mod runner;
pub mod sphere_geom;
pub mod synthdata;
pub mod tensor;

pub use error::{Error, Result};
