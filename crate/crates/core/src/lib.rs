//! Fast weight programmers: a slow network emits keys, values and gates that
//! rewrite a per-head fast weight matrix at every step.
//!
//! The same models are available in recurrent, attention and chunk-wise
//! form, with a small reverse-mode engine for training and gradient checks.

pub mod attention;
pub mod autodiff;
pub mod bench;
pub mod checkpoint;
pub mod chunkwise;
pub mod constructions;
pub mod equiv;
pub mod error;
pub mod layer;
pub mod rng;
pub mod rules;
pub mod tasks;
pub mod tensor;

pub use error::{FwpError, Result};
pub use layer::{forward_seq, step, FastState, LayerConfig, PhiMap, SlowWeights};
pub use rules::{apply_rule, StepInputs, UpdateRule};
pub use tensor::{Mat, Vector};
