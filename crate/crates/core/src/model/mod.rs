//! Network configuration, assembly and inference.

mod config;
mod filter;
mod network;

pub use config::{InputKind, MaskKind, ModelConfig, Variant, DF_CHANNELS};
pub use filter::{apply_complex_mask, apply_real_mask, deep_filter};
pub use network::{rms_scale, DfHead, ForwardOutput, FullBand, Model, MptBlock, WaveForward, LPS_FLOOR};
