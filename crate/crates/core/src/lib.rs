//! Match-LSTM natural language inference.
//!
//! Sentences are encoded with an LSTM (or a bi-LSTM, or passed through as
//! raw embeddings), each hypothesis word attends over the premise plus a
//! NULL slot, and a match-LSTM reads `[attended premise; hypothesis state]`
//! word by word. Its last state predicts entailment, contradiction or
//! neutral. Gradients come from a small reverse-mode tape in [`numerics`].

pub mod error;
pub mod numerics;

pub use error::{Error, Result};
pub mod attention;
pub mod checkpoint;
pub mod cli;
pub mod embeddings;
pub mod encoder;
pub mod introspect;
pub mod matcher;
pub mod reference;
pub mod snli;
pub mod training;
