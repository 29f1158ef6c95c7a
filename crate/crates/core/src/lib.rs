pub mod corruption;
pub mod data;
pub mod diffcore;
pub mod error;
pub mod evalkit;
pub mod gradcheck;
pub mod model;
pub mod objective;
pub mod scoring;
pub mod training;

pub use error::{Error, ErrorCategory, Result};
