//! Parameter storage and the small set of layers the detector is built from.

pub mod attention;
pub mod layers;
pub mod params;

pub use attention::{scaled_dot_attention, Attended, MultiHeadAttention};
pub use layers::{Act, BatchNorm2d, Conv2d, ConvBn, DepthwiseConv, LayerNorm, Linear, Mlp, Mode};
pub use params::{Init, ParamBuilder, ParamStore};
