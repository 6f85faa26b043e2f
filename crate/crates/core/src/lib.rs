//! Desk-scale toolkit for extending the context window of masked-diffusion
//! language models: NTK-aware rotary scaling, boundary-aware sequence packing,
//! a small manually-differentiated diffusion transformer, post-training, and
//! long-context evaluation (Monte-Carlo perplexity, needle retrieval).

pub mod data;
pub mod error;
pub mod eval;
pub mod math;
pub mod model;
pub mod packing;
pub mod rope;
pub mod tokenizer;
pub mod trainer;

pub use error::{Error, Result};
