//! GSD-aware masked autoencoder pretraining.
//!
//! The model patchifies a downsampled crop, masks most patches, encodes the
//! rest with a ViT whose positional encoding is scaled by ground sample
//! distance, and decodes to a low-frequency image at input resolution plus a
//! high-frequency residual at the crop's native resolution. A frozen-encoder
//! kNN probe measures representation quality across downsampling scales.
//!
//! All numeric code is generic over [`Scalar`] (`f32` / `f64`); the aliases
//! below pin the common instantiations.

pub mod autograd;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod imaging;
pub mod model;
pub mod nn;
pub mod objective;
pub mod optim;
pub mod patching;
pub mod pipeline;
pub mod posenc;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type RasterImageF32 = imaging::RasterImage<f32>;
pub type RasterImageF64 = imaging::RasterImage<f64>;
