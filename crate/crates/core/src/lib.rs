//! Transition-aware temporal phase recognition on a synthetic workflow
//! benchmark.
//!
//! The crate is organized around the pipeline:
//!
//! * [`tensor`] — dense-tensor engine with reverse-mode differentiation
//! * [`sim`] — Markov workflow simulator producing labeled feature sequences
//! * [`dataset`] — binary video files and plain-text manifests
//! * [`backbone`] — windowed attention encoder, pseudo-future padding, heads
//! * [`nfsm`] — global state embeddings and dynamic transition tables
//! * [`training`] — dual-loss two-stage training, optimizer, checkpoints
//! * [`inference`] — transition-aware streaming and offline prediction
//! * [`metrics`] — evaluation suite (accuracy, phase metrics, mAP, fragmentation)

pub mod backbone;
pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod inference;
pub mod metrics;
pub mod kvtext;
pub mod nfsm;
pub mod sim;
pub mod tensor;
pub mod training;

pub use backbone::{ModelConfig, ModelParams, WindowSample};
pub use checkpoint::Checkpoint;
pub use training::TrainConfig;
pub use dataset::Dataset;
pub use error::{Error, Result};
pub use sim::{FrameRecord, VideoSequence, WorkflowSpec};
pub use tensor::{Tape, Tensor};
