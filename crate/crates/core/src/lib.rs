//! Desk-scale incremental semantic segmentation.
//!
//! A small fully-convolutional network is trained over a sequence of steps,
//! each adding new classes whose labels are the only ones available. The
//! crate provides the gradient-compensated, relation-distilled,
//! prototype-relabeled training method alongside fine-tuning, joint and
//! plain-distillation baselines, synthetic scenario generation and mIoU
//! evaluation.

pub mod autodiff;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod relabel;
pub mod report;
pub mod scenario;
pub mod segnet;
pub mod trainer;

pub use error::{GscError, Result};
