pub mod autodiff;
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod fields;
pub mod geometry;
pub mod rendering;
pub mod training;

pub use error::{Error, Result};
