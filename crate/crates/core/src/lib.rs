//! Compositional language models.
//!
//! A general "default" LM is combined with independently trained component
//! LMs (weighted automata or LSTMs over the same subword vocabulary). Per
//! token, learned activation policies decide when each component starts a
//! new span, and an attention network interpolates all component
//! distributions.

pub mod components;
pub mod composite;
pub mod error;
pub mod eval;
pub mod neural;
pub mod training;
pub mod vocab;

pub use error::{Error, Result};
