pub mod base;
pub mod canf;
pub mod codec;
pub mod config;
pub mod data;
pub mod enhance;
pub mod entropy;
pub mod error;
pub mod gop;
pub mod interp;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod profile;
pub mod report;
pub mod stats;
pub mod train;

pub use error::{Error, Result};
