//! Signal and text encoders, cross-attention, merge and projection heads.

mod config;
pub mod layers;
mod model;
mod tokenizer;

pub use config::{EncoderConfig, MergeMethod, Pooling, SignalArch};
pub use model::{DualEncoder, TextBatch};
pub use tokenizer::{Vocab, PAD, SUM, UNK};
