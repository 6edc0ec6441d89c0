//! Weakly supervised instance attention for multisource fine-grained
//! recognition.

pub mod attention;
mod binio;
pub mod cli;
pub mod data;
pub mod encoder;
pub mod error;
pub mod fusion;
pub mod localize;
pub mod metrics;
pub mod model;
pub mod proposals;
pub mod reference;
pub mod report;
pub mod tensor;
pub mod train;
pub mod verify;

pub use binio::write_atomic;
pub use error::{Error, Result};
