//! Temporal adversarial augmentation on a desk-scale video classifier.

pub mod attack;
pub mod cam;
pub mod cli;
pub mod data;
pub mod error;
pub mod nn;
pub mod taf;
pub mod tensor;

pub use error::{Error, Result};
