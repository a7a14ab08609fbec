//! Fusion blocks and the multi-scale neck.

pub mod fbcsp;
pub mod neck;

pub use fbcsp::{Bottleneck, Fbcsp, FbcspConfig, FusionConfig};
pub use neck::{upsample, Downsample, Neck, NeckConfig, NeckOutputs};
