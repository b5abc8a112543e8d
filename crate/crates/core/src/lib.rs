pub mod acoustic;
pub mod checkpoint;
pub mod dsp;
pub mod duration;
pub mod error;
pub mod frontend;
pub mod nn;
pub mod pipeline;
pub mod toy;
pub mod vocoder;

pub use error::{Error, ErrorCategory, Result};
