pub mod diffcore;
pub mod encoder;
pub mod error;
pub mod formats;
pub mod geoformer;
pub mod geometry;
pub mod gradsuite;
pub mod gsplat;
pub mod losses;
pub mod nn;
pub mod occupancy;
pub mod pipeline;
pub mod scenegen;

pub use error::{Error, Result};
