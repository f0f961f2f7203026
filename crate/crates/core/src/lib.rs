//! Desk-scale streaming sequence-to-sequence engine built around
//! accumulation-based monotonic attention halting.
//!
//! The crate trains and decodes a small Transformer whose decoder
//! cross-attention can run in three modes: full offline softmax, per-head
//! accumulation halting (dacs), and head-synchronous halting with a joint
//! threshold (hsdacs). Alongside the model it ships a synthetic monotonic
//! transduction task, decoding-cost measurement, threshold sweeps, and
//! alignment-trace export.

pub mod config;
pub mod data;
pub mod decoder;
pub mod error;
pub mod eval;
pub mod halting;
pub mod rng;
pub mod tensor;
pub mod training;
pub mod transformer;

pub mod checkpoint;
pub mod cli;

pub use config::{DataConfig, HaltingMode, ModelConfig, RunConfig, TrainConfig};
pub use error::{Error, Result};
