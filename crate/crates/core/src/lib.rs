pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod evalbench;
pub mod experiment;
pub mod glyphkit;
pub mod maskforge;
pub mod objectives;
pub mod sampler;
pub mod train;
pub mod velocitynet;

pub use error::{Error, Result};
