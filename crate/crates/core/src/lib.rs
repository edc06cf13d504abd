//! Two-dimensional Matryoshka sentence embeddings: a small transformer
//! encoder trained so that every `(layer, prefix-dimension)` sub-model is
//! usable on its own, plus the harness that measures each cell.

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod objectives;
pub mod pca;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use autodiff::{Gradients, Graph, Var};
pub use checkpoint::Checkpoint;
pub use encoder::{EncoderConfig, EncoderParams, Pooling, Vocab};
pub use error::{Error, Result};
pub use eval::{SubModelSelector, SweepResult};
pub use objectives::{ObjectiveConfig, ObjectiveKind, Variants};
pub use tensor::{Scalar, Tensor};
pub use trainer::{train, TrainConfig};
