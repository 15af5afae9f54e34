//! Rotation-equivariant bird's-eye-view 3D detection on CPU.

pub mod audit;
pub mod backbone;
pub mod boxes;
pub mod config;
pub mod conv;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod group;
pub mod head;
pub mod io;
pub mod metrics;
pub mod model;
pub mod params;
pub mod pillar;
pub mod plot;
pub mod rng;
pub mod scene;
pub mod targets;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::GridTensor;
