//! Neural transition-based executable semantic parsing.
//!
//! Utterances are mapped to logical-form trees by a Stack-LSTM parser over
//! `{TER, NT, REDUCE}` actions, with an attention-based copy mechanism,
//! gazetteer delexicalisation, and multi-task / pretrain-finetune transfer.

pub mod attention_copy;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod numerics;
pub mod parser;
pub mod registry;
pub mod synth;
pub mod transfer;
pub mod transition;
pub mod variants;

pub use error::{Error, Result};
