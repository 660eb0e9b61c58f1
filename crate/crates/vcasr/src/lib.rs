//! Visual-context ASR laboratory: synthetic audio-visual corpus generation,
//! three context-aware recognizer architectures, decoding and scoring.

pub mod config;
pub mod deliberation;
pub mod error;
pub mod fusion;
pub mod grounding;
pub mod io;
pub mod metrics;
pub mod modelkit;
pub mod multistream;
pub mod s2s;
pub mod seeds;
pub mod synthdata;
pub mod tensor;
pub mod vocab;

pub use error::{Error, Result};
pub use tensor::Tensor;
