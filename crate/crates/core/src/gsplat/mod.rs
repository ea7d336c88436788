//! Gaussian decoding and splatting.

mod decode;
mod render;

pub use decode::{DecodeRanges, GaussianHead, GaussianSet, RAW_CHANNELS};
pub use render::{render_records, RenderOut, BACKGROUND, LOW_PASS, MAX_CONDITION, MIN_TRANSMITTANCE, RENDER_CHANNELS, WEIGHT_CUTOFF};
