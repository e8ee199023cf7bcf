//! Multitask multimodal training with dynamic task and class-weight
//! curriculum scheduling.
//!
//! The crate couples a small from-scratch tensor/differentiation core with a
//! U-shaped segmentation network, a character-level question classifier,
//! task-blended losses, and a gradient-based scheduler that adapts the task
//! balance and the per-answer-class loss weights during training.
//!
//! Core math is generic over the scalar type via [`scalar::Scalar`];
//! the aliases below fix `f64`, which the trainer and all oracle-grade
//! gradient checks use.

pub mod checkpoint;
pub mod curriculum;
pub mod data;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod plot;
pub mod rng;
pub mod scalar;
pub mod tape;
pub mod tensor;
pub mod text;
pub mod trainer;
pub mod verify;

pub use scalar::Scalar;

/// Dense `f64` tensor.
pub type Tensor = tensor::Tensor<f64>;
/// Differentiation tape over `f64`.
pub type Tape = tape::Tape<f64>;
/// Gradients from a backward sweep over `f64`.
pub type Gradients = tape::Gradients<f64>;
/// Model parameter set over `f64`.
pub type ModelParams = model::ModelParams<f64>;
/// Per-batch loss record over `f64`.
pub type LossBreakdown = loss::LossBreakdown<f64>;
/// Scheduler state over `f64`.
pub type SchedulerState = curriculum::SchedulerState<f64>;
/// Multimodal sample over `f64`.
pub type Sample = data::Sample<f64>;
/// Multimodal dataset over `f64`.
pub type Dataset = data::Dataset<f64>;
