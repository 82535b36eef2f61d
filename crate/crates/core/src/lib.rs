//! Sequence-parallel Vision Transformer training on a simulated multi-rank
//! runtime.

pub mod attention;
pub mod collectives;
pub mod costmodel;
pub mod error;
pub mod harness;
pub mod hybrid;
pub mod numerics;
pub mod seqpar;
pub mod vit;

pub use error::{Error, Result};
