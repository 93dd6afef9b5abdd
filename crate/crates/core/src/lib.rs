//! Structural representation alignment for flow-matching training.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`] and [`autodiff`]: dense tensors and a reverse-mode tape.
//! - [`align`]: point-wise and structural (Gram MSE / relational KL)
//!   alignment losses.
//! - [`flow`]: linear-interpolant flow matching, Euler sampling and
//!   classifier-free guidance.
//! - [`nets`]: the student denoiser, its projection head and the frozen
//!   teacher encoder.
//! - [`data`]: procedural token-grid images and the dataset file format.
//! - [`train`]: optimizer, EMA, configuration, checkpoints and the training
//!   loop.
//! - [`eval`]: teacher-space Fréchet distance, Gram discrepancy and
//!   similarity-map export.
//! - [`gradsuite`]: the finite-difference verification suite.

pub mod align;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod eval;
pub mod flow;
pub mod gradsuite;
pub mod nets;
pub mod tensor;
pub mod train;

pub use align::{LossWeights, StructuralVariant};
pub use autodiff::{Activation, GradCheckReport, Gradients, Tape, Var};
pub use data::{DataConfig, Dataset};
pub use error::{Error, Result};
pub use eval::{EvalModels, EvalReport};
pub use flow::SamplerConfig;
pub use nets::StudentConfig;
pub use tensor::{Scalar, Tensor};
pub use train::{Checkpoint, MetricsRow, TrainConfig};
