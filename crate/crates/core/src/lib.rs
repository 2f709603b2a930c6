//! Byte-level sequence-to-sequence toolkit built around adaptive multi-scale
//! attention with a mixture of contextualization experts.

pub mod analysis;
pub mod attention;
pub mod bleu;
pub mod checkpoint;
pub mod error;
pub mod experts;
pub mod model;
pub mod optim;
pub mod router;
pub mod tape;
pub mod tensor;
pub mod tokenizer;
pub mod training;

pub use error::{Error, Result};
