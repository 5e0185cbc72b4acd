//! tiqat: a desk-scale lab for ternary quantization-aware training of
//! small transformer encoders.
//!
//! The crate provides a tape-based autodiff core, a post-LN encoder with
//! full activation traces, threshold ternarization with straight-through
//! gradients, teacher-intervention distillation schedules, and curvature
//! diagnostics (Hessian eigenvalues, loss-landscape slices, attention
//! ranking metrics). Everything is deterministic given a seed: reruns
//! produce bit-identical weights, metrics, and reports, with or without
//! the `parallel` feature.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod diagnostics;
pub mod distill;
pub mod error;
pub mod fdcheck;
pub mod parallel;
pub mod model;
pub mod optim;
pub mod quant;
pub mod schedule;
pub mod tensor;
pub mod train;
