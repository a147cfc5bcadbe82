//! Time-delay estimation between two microphones with the frequency-sliding
//! generalized cross-correlation (FS-GCC), denoised by rank-one SVD
//! reconstructions or by a convolutional U-Net autoencoder.

pub mod dataset;
pub mod dsp;
pub mod error;
pub mod fsgcc;
pub mod gcc;
pub mod lowrank;
pub mod metrics;
pub mod room;
pub mod unet;

pub use error::*;
