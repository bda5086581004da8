//! Desk-scale multi-dataset contrastive pre-training followed by
//! multi-task continual learning and per-task fine-tuning.
//!
//! The pipeline has three stages:
//!
//! 1. [`moco`]: momentum-contrastive pre-training on a pool aggregated
//!    from several gray-scale datasets ([`preprocess`]).
//! 2. [`cl`]: continual learning over the supervised tasks with per-round
//!    task reshuffling, a cyclic cosine learning rate and an L²-SP anchor
//!    to the previous iterate's backbone.
//! 3. [`finetune`]: independent per-task fine-tuning and evaluation
//!    ([`metrics`]).
//!
//! [`pipeline`] chains the stages for each ablation variant described by a
//! [`config::RunConfig`] and writes [`checkpoint`] files along the way.

pub mod autograd;
pub mod checkpoint;
pub mod cl;
pub mod config;
pub mod error;
pub mod finetune;
pub mod metrics;
pub mod moco;
pub mod nets;
pub mod optim;
pub mod pipeline;
pub mod preprocess;
pub mod seed;
pub mod synth;
pub mod task;
pub mod tensor;

pub use error::{Error, Result};
