//! Tiny autodiff language model with per-parameter importance estimation and
//! importance-guided selective fine-tuning.

pub mod autodiff;
pub mod data;
mod error;
pub mod gradcheck;
pub mod importance;
pub mod model;
pub mod training;

pub use error::{Error, Result};
