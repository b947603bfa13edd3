//! Compact student tracker learned from teacher trackers by distillation and
//! advantage actor-critic reinforcement learning, plus the inference modes
//! and evaluation harness built around it.

pub mod environment;
pub mod evaluation;
pub mod error;
pub mod frame;
pub mod geometry;
pub mod learning;
pub mod student;
pub mod teachers;
pub mod tracking;
pub mod transferset;

pub use error::{Error, Result};
