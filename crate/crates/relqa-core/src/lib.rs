//! Relation-graph question answering at desk scale.
//!
//! The crate implements the full stack: a reverse-mode autodiff tape over
//! dense f64 tensors, a transformer question encoder, three relation-graph
//! attention encoders (implicit, semantic, spatial), question-guided graph
//! fusion, attention-based object filtering, an answer classifier, Adamax
//! training with a warmup schedule, a deterministic synthetic corpus
//! generator, and checkpoint / report serialization.

pub mod autodiff;
pub mod error;
pub mod layers;
pub mod schedule;
pub mod store;
pub mod util;

pub use autodiff::{Tape, Tensor, TensorId};
pub use error::{Error, Result};
pub use schedule::LrSchedule;
pub use store::{Param, ParameterStore};
