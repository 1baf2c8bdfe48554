//! Spatial-frequency multimodal image fusion.
//!
//! A desk-scale library and CLI that fuses two aligned single-channel images
//! by decoupling learned feature maps into wavelet subbands, mixing the
//! modalities per frequency band with spatial-frequency state-space blocks,
//! recoupling, and reconstructing. Ships with a reverse-mode gradient tape
//! for training the fusion losses, analytic fusion-quality metrics, and PNM
//! image I/O.

pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod losses;
pub mod metrics;
pub mod pipeline;
pub mod error;
pub mod imageio;
pub mod fft;
pub mod ssd;
pub mod tensor;
pub mod wavelet;

pub use error::{Error, Result};
pub use tensor::Tensor;
