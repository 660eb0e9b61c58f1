//! Reverse-mode autodiff tape plus the reusable model pieces built on it:
//! parameter stores, recurrent encoder/decoder layers, the training loss,
//! the optimizer, a finite-difference gradient checker and checkpoints.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod loss;
pub mod optim;
pub mod params;

pub use checkpoint::Checkpoint;
pub use gradcheck::{gradient_check, GradCheckReport};
pub use graph::{Graph, Tape, Var};
pub use layers::{DecoderCore, EncoderStack, GruCell, LAYER_NORM_EPS};
pub use loss::label_smoothed_loss;
pub use optim::{clip_global_norm, Adam, AdamConfig};
pub use params::{xavier, GradStore, ParamId, Params};
