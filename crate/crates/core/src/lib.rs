pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod evalsuite;
pub mod objective;
pub mod oracle;
pub mod run;
pub mod sampler;
pub mod schedule;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
