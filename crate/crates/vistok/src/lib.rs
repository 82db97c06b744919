//! Fixed-budget visual tokens for long-context text.
//!
//! A page of rendered text costs a constant number of model-input slots no
//! matter how dense the text is, while its OCR transcript can blow past any
//! context limit. This crate contains the full pipeline for studying that
//! trade-off at desk scale: corpus ingestion and synthesis, deterministic
//! page rendering, a byte-level BPE tokenizer with token-budget accounting,
//! interleaved image/text sequence assembly, long-context task generation,
//! a small trainable multimodal decoder, and evaluation/reporting tools.

pub mod assemble;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod font;
pub mod model;
pub mod render;
pub mod run;
pub mod taskgen;
pub mod textok;

pub use error::{Error, Result};
