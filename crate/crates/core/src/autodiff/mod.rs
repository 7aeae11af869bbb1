//! Reverse-mode gradients, optimizer and the trainable block stack.

pub mod adam;
pub mod gradcheck;
pub mod graph;
pub mod mixers;
pub mod model;
pub mod params;
pub mod train;

pub use adam::{adam_step, clip_global_norm, AdamConfig, AdamState};
pub use gradcheck::{all_mixers, check_mixer, check_model, finite_diff_check, gradcheck_suite, GradCheckReport, SuiteResult};
pub use graph::{Graph, Var};
pub use mixers::{backward_seq, FwpMixer, MixerSpec};
pub use model::{loss_and_grad, loss_grad_output, loss_value, ModelConfig, Target};
pub use params::ParamSet;
pub use train::{metrics_csv, model_for_task, train, LossMode, MetricRow, TrainConfig, TrainOutcome, TrainedModel, TrainedSetup};
