pub mod align;
pub mod checkpoint;
pub mod datasets;
pub mod error;
pub mod eval;
pub mod merge;
pub mod network;
pub mod repair;

pub use error::{Error, FormatError, Result};
