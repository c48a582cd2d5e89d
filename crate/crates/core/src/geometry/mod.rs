//! Transforms, warping, resampling, pyramids and registration.

pub mod pyramid;
pub mod register;
pub mod resample;
pub mod transform;
pub mod warp;

pub use pyramid::Pyramid;
pub use register::{register_pair, register_stack, Registration};
pub use resample::{bicubic_upsample, box_downsample, destripe, gaussian_blur, Downsampled};
pub use transform::{TransformKind, TransformParams};
pub use warp::{valid_mask, warp};
