//! Multi-space visual-semantic embedding for sentence-to-video retrieval,
//! built on a small reverse-mode autodiff tape.

pub mod aggregation;
pub mod autodiff;
pub mod config;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod params;
pub mod retrieval;
pub mod tensor;
pub mod text;
pub mod training;
pub mod visual;

pub use error::{Error, Result};
