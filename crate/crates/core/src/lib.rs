//! Forestry crane simulator with a from-scratch PPO learner for
//! energy-aware log grasping.
//!
//! The crate is organized as the simulation stack (`crane`, `geom`,
//! `world`), the MDP (`env`, `curriculum`), the learner (`nn`, `ppo`,
//! `rollout`, `train`), and tooling (`eval`, `config`, `checkpoint`).

// Negated comparisons reject NaN in config validation; the MSRV predates
// `is_multiple_of`; joint-indexed loops read better with an index.
#![allow(
    clippy::neg_cmp_op_on_partial_ord,
    clippy::manual_is_multiple_of,
    clippy::needless_range_loop,
    clippy::too_many_arguments
)]

pub mod checkpoint;
pub mod config;
pub mod crane;
pub mod curriculum;
pub mod env;
pub mod error;
pub mod eval;
pub mod geom;
pub mod nn;
pub mod ppo;
pub mod rollout;
pub mod train;
pub mod world;

pub use checkpoint::Checkpoint;
pub use config::RunConfig;
pub use crane::{CraneModel, CraneState};
pub use env::{Env, EnvConfig, RewardMode, TerminationCause};
pub use error::{Error, Result};
pub use nn::PolicyNet;
pub use train::Trainer;
