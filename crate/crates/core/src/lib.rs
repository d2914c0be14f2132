//! Device-directed speech detection with a frozen decoder-only language model.
//!
//! Audio representations and ASR decoder signals are mapped into the model's
//! embedding space as single-vector prefixes, concatenated with the 1-best
//! hypothesis tokens and the prompt `directed decision:`, and the model is
//! adapted with LoRA so that the next token after the prompt is `yes` or `no`.
//! The probability of `yes` is the directedness score, evaluated by EER.

pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod features;
pub mod lm;
pub mod lora;
pub mod prefix;
pub mod rng;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
