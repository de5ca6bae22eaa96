//! Dynamic-static layer skipping for a toy layered manipulation policy.

pub mod bench;
pub mod checkpoint;
pub mod distill;
pub mod error;
pub mod flops;
pub mod numerics;
pub mod policy;
pub mod profiler;
pub mod runtime;
pub mod sim;
pub mod stats;

pub use error::{Error, Result};
