pub mod classifier;
pub mod digest;
pub mod error;
pub mod povm;
pub mod tomography;
pub mod waveform;

pub use error::{Error, Result};
