//! Two-stage multi-task multi-agent reinforcement learning on a
//! deterministic desk-scale skirmish environment.
//!
//! Stage one discovers a small set of discrete skills from offline
//! multi-task trajectory data with an attention-based trajectory encoder and
//! a recurrent action decoder trained as a beta-VAE. Stage two learns a
//! high-level policy over those skills with value decomposition (monotonic
//! mixing), training on batches that blend offline trajectories with fresh
//! online episodes at a linearly decaying ratio, plus a consistency loss
//! tying a local skill encoder to the frozen global one and a dynamically
//! weighted conservative regularizer. Trained policies transfer zero-shot to
//! team sizes never seen in training.
//!
//! Module map:
//! - [`num`]: tensors, gradient tape, Adam, gradient checking
//! - [`arena`]: the cooperative skirmish environment family
//! - [`data`]: datasets, replay buffer, hybrid sampling schedule
//! - [`nets`]: network shapes, initialization, plain-array forward passes
//! - [`skills`]: stage-one skill discovery
//! - [`policy`]: stage-two hybrid policy learning and execution

pub mod arena;
pub mod data;
pub mod error;
pub mod nets;
pub mod num;
pub mod policy;
pub mod rng;
pub mod skills;

pub use error::{Error, Result};
pub use rng::Rng;
