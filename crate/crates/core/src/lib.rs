//! LiRA: light-robust adversarial learning of world models for model-based
//! reinforcement learning.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: reverse-mode autodiff with gradient reversal and graph cuts
//! - [`neural`]: multilayer perceptrons, activations and the Adam optimizer
//! - [`flows`]: Gaussians, bounded uniforms, linear rational spline flows
//! - [`envs`]: disturbable environments and test-noise generators
//! - [`planner`]: sampling-based MPC on the marginalized world model
//! - [`learner`]: replay buffer, loss assembly and multiplier auto-tuning
//! - [`stats`], [`config`], [`checkpoint`], [`harness`]: experiment plumbing

pub mod checkpoint;
pub mod config;
pub mod envs;
pub mod error;
pub mod flows;
pub mod harness;
pub mod learner;
pub mod neural;
pub mod planner;
pub mod stats;
pub mod tensor;

pub use error::{LiraError, Result};

/// Random stream used throughout; seeded explicitly for reproducibility.
pub type LiraRng = rand_chacha::ChaCha8Rng;
