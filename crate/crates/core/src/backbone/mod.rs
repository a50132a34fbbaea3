//! The segmentation network and its training loss.

mod block;
mod config;
mod encf;
mod loss;
mod model;
mod patch;
mod scan;
mod ss2d;

pub use block::{EnvssBlock, EnvssCache};
pub use config::{ModelConfig, ModulationMode, TcmaConfig};
pub use encf::{Encf, EncfCache};
pub use loss::{argmax_mask, cross_entropy, sample_loss, soft_dice_term, softmax, DICE_SMOOTH};
pub use model::{count_params, unbatch, DecoderStage, EncoderStage, ForwardCache, ForwardOutput, S3Mamba};
pub use patch::{PatchEmbed, PatchEmbedCache, PatchExpand, PatchExpandCache, PatchMerge};
pub use scan::{linear_recurrence, selective_scan_1d, selective_scan_1d_backward, ScanCache, ScanParams};
pub use ss2d::{scan_sum, scan_sum_backward, ScanDirection, Ss2d, Ss2dCache};

/// A dense (B, H, W, C) activation tensor.
pub type FeatureMap = ndarray::Array4<f64>;
