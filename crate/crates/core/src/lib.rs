pub mod checkpoint;
pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod postprocess;
pub mod types;

pub use error::{Error, Result};
pub mod alloc;
pub mod harness;
