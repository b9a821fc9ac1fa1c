//! Hybrid beamforming for extremely large arrays with a complex-valued
//! network that learns pilot sensing and analog precoding end to end.

pub mod channel;
pub mod error;
pub mod harness;
pub mod io;
pub mod network;
pub mod precoding;
pub mod protocol;
pub mod rng;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
