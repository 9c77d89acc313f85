//! Word-aligned contrastive pretraining for speech translation with scarce
//! parallel data, sized to run on a laptop CPU.

pub mod alignment;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod pipeline;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
