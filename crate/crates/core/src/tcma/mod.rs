//! Tensor-based cross-feature multi-scale attention.
//!
//! Input-image features, per-category prediction features and Sobel edge
//! features are aligned on a decoder stage grid, partitioned into patches at
//! several scales and contracted into per-patch attention scalars. The fused
//! map modulates the stage's intermediate mask, which is projected back into
//! the decoder features.

mod ops;
mod unit;

pub use ops::{
    base_tensor, base_tensor_backward, broadcast_patches, fuse_scales, inverse_partition, modulate,
    modulate_backward, partition, tile_sums, weighted_aggregate,
};
pub use unit::{
    build_pyramid, dynamic_weights, per_category_projection, write_attention_tiff, PyramidFeatures,
    ScaleMlp, ScaleMlpCache, TcmaCache, TcmaOutput, TcmaUnit,
};
