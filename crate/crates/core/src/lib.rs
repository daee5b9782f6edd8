//! A decoder-only transformer with residual adapters and a copy
//! head, trained on dialogues written as plain text.
//!
//! The crate covers the whole pipeline at desk scale: a small autodiff
//! engine ([`tensor`]), the network ([`model`]), a byte-fallback subword
//! codec ([`codec`]), the dialogue linearization ([`dialogue`]), an entity
//! store ([`kb`]), a synthetic corpus ([`corpus`]), training ([`train`]),
//! staged greedy decoding ([`infer`]) and metrics ([`eval`]).

pub mod codec;
pub mod corpus;
pub mod dialogue;
pub mod error;
pub mod eval;
pub mod infer;
pub mod kb;
pub mod model;
pub mod pipeline;
pub mod tensor;
pub mod train;

pub use error::{AcnError, Result};
pub use model::{Checkpoint, ForwardOutput, Model, ModelConfig, ParamPartition};
pub use tensor::{Tape, Tensor, Var};
