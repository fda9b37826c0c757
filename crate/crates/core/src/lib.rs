//! Interactive 3D segmentation with a memory of past interactions.

pub mod alloc;
pub mod archive;
pub mod autodiff;
pub mod bench;
pub mod decoder;
pub mod encoder;
pub mod engine;
pub mod error;
pub mod memory;
pub mod nn;
pub mod params;
pub mod prompts;
pub mod rle;
pub mod tensor;
pub mod training;
pub mod volcore;

pub use error::{Error, Result};
pub use tensor::Tensor;
pub use volcore::{dice, Click, Dims, Mask, PatchSpec, Polarity, Volume};
