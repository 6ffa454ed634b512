//! Stacked discriminative autoencoders trained by alternating closed-form
//! least-squares updates with a Bregman variable, plus the data loading and
//! nearest-neighbor evaluation around them.

pub mod atomic;
pub mod classify;
pub mod cli;
pub mod data;
pub mod error;
pub mod layer;
pub mod lsq;
pub mod matrix;
pub mod stack;

pub use error::{Error, Result};
pub use matrix::Matrix;
