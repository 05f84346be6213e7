//! Desk-scale road-flood detection pipeline.
//!
//! Simulates satellite L1C-style imagery from a source raster, segments
//! surface water with NDWI or a compact residual U-Net, compresses the model
//! by magnitude pruning and int8 quantization, intersects the water mask with
//! a road network, and accounts inference latency per unit area.

pub mod bench;
pub mod error;
pub mod modelopt;
pub mod pipeline;
pub mod raster;
pub mod render;
pub mod roads;
pub mod segnet;
pub mod sim;
pub mod water;

pub use error::{Error, Result};
pub use raster::{Band, GeoTransform, Mask, Raster};
