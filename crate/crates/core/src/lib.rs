//! Dense reward relabeling for language-annotated offline trajectories.
//!
//! The crate covers the whole offline pipeline on a small deterministic
//! instruction-following gridworld:
//!
//! - [`env`]: the LangGrid world, task generation, scripted demonstrations and rendering.
//! - [`dataset`]: trajectory and reward-label storage, batching.
//! - [`annotator`]: windowed two-stage querying of a vision-language backend for 0-10 action scores.
//! - [`baselines`]: sparse and embedding-similarity reward labelers.
//! - [`iql`]: language-conditioned implicit Q-learning with hand-written gradients.
//! - [`eval`]: completion-rate evaluation under fixed and randomized initial states.
//! - [`cli`]: the `rgvlm` command-line workflow.

pub mod annotator;
pub mod baselines;
pub mod cli;
pub mod dataset;
pub mod env;
pub mod eval;
pub mod iql;
pub mod seed;

mod error;

pub use error::{Error, Result};
