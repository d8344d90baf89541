//! The segmentation network and its parameter containers.

pub mod layers;
mod params;
mod unet;

pub use params::{Grads, NamedArray, ParamStore};
pub use unet::{sigmoid, ForwardPass, Mode, UNet, UNetConfig, Upsample};
