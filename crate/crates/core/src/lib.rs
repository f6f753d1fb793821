//! Direction-aware next-POI recommendation: geographic graph, low-rank
//! transition directions, magnetic-Laplacian phase tokens and a
//! phase-rotating selective state-space model.

pub mod bank;
pub mod binio;
pub mod config;
pub mod direction;
pub mod error;
pub mod geo;
pub mod ingest;
pub mod model;
pub mod phase;
pub mod pipeline;
pub mod scalar;
pub mod spectral;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Model64 = model::Model<f64>;
pub type Model32 = model::Model<f32>;
