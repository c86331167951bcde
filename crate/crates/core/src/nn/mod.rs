//! Minimal neural-network toolkit over candle tensors.

pub mod conv;
pub mod layers;
pub mod params;
pub mod softmax;

pub use conv::{conv2d, conv2d_with};
pub use layers::{Attention, Conv2d, GroupNorm, LayerNorm, Linear, LoraConv2d, LoraLinear};
pub use params::{Init, ParamBuilder, ParamStore};
