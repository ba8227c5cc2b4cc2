//! Hidden-state optimization for a small decoder-only language model.
//!
//! The model, the window-wise state optimizer, a dynamic-evaluation
//! baseline, the perplexity and few-shot harnesses and a pretraining loop.

pub mod checkpoint;
pub mod config;
pub mod dynamic_eval;
pub mod error;
pub mod eval;
pub mod fewshot;
pub mod gradcheck;
pub mod hso;
pub mod manifest;
pub mod model;
pub mod synthetic;
pub mod tokenizer;
pub mod train;

pub use error::{Error, Result};
