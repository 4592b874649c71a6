//! Layers and the U-Net-lite denoiser.

mod conv;
mod layers;
mod unet;

pub use conv::{conv3d, conv3d_backward, ConvGeometry};
pub use layers::{time_embedding, Conv3dLayer, GroupNormLayer, LinearLayer};
pub use unet::{
    default_targets, AdapterSpec, AttachReport, AttachedLayer, UNetConfig, UNetLite, TARGET_GROUPS,
};
