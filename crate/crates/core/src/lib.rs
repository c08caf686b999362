//! Continual learning with linked adapters on a small frozen vision transformer.
//!
//! Each task trains its own bottleneck adapters and head; a weight MLP turns
//! pairs of task embeddings into per-layer lateral weights that mix the
//! adapters of other tasks into the current task's stream. The MLP is shared
//! across tasks and protected with online EWC.

pub mod adapter;
pub mod backbone;
pub mod checkpoint;
pub mod compose;
pub mod config;
pub mod data;
pub mod error;
pub mod ewc;
pub mod gradcheck;
pub mod gradcheck_suite;
pub mod hypernet;
pub mod metrics;
pub mod optim;
pub mod rng;
pub mod runner;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{ParamSet, Parameter, Tensor};
