//! Neural network layers: convolutions, normalization, pooling and the
//! parameter store they draw from.

pub mod conv;
pub mod norm;
pub mod params;
pub mod pool;

pub use conv::{
    conv2d, conv_out_extent, conv_transpose2d, conv_transpose_out_extent, depthwise_conv3x3, Conv2d,
    ConvOptions, ConvTranspose2d,
};
pub use norm::{batch_norm, layer_norm, BatchNorm2d, BatchStats, LayerNorm2d};
pub use params::{Bindings, Ctx, ParamEntry, ParamId, ParamStore};
pub use pool::max_pool2x2;
