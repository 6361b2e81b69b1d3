//! Rasters, GSD-tracked resampling, crops and band-pass target construction.

mod io;
mod raster;
pub mod resample;
mod targets;

pub use io::{from_dynamic, load_image, save_png};
pub use raster::RasterImage;
pub use resample::{resample, resample_square, AxisWeights};
pub use targets::{build_targets, crop_offsets, make_input, random_scaled_crop, BandpassTargets};
