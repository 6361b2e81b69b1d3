//! Parameter storage and the layer zoo shared by encoder and decoder.

pub mod gradcheck;
pub mod layers;
#[cfg(test)]
pub(crate) mod oracle;
pub mod params;

pub use layers::{Attention, ConvTranspose, DepthwiseConv, LayerNorm, Linear, TransformerBlock};
pub use params::{Init, ParamId, ParamLayout, ParamSpec, ParamStore};
