//! Patch encoders and multi-magnification view generation.

mod views;
mod vit;

pub use views::{
    make_multimag_views, normalize_imagenet, patch_to_float, resize_bilinear, CropMode, Magnification,
    MultiMagViews, IMAGENET_MEAN, IMAGENET_STD,
};
pub use vit::{encode_tokens, patchify, EncoderConfig, LoraConfig, TokenEncoder, TokenSequence, VitEncoder};
