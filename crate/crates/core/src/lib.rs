//! No-reward meta learning (NoRML) alongside MAML-RL and domain randomization.
//!
//! The crate is organized bottom-up:
//!
//! - [`diffgraph`]: reverse-mode autodiff with differentiable gradients.
//! - [`netcore`]: Gaussian MLP policy and the learned advantage network.
//! - [`envs`]: point agent with rotated actions, cart-pole with a biased
//!   angle sensor.
//! - [`rollout`]: trajectory collection with deterministic per-rollout seeds.
//! - [`advantage_est`]: discounted returns, polynomial value baseline.
//! - [`meta`]: inner adaptation rules, PPO meta-objective, meta-gradient,
//!   Adam, meta-training and fine-tuning.
//! - [`harness`]: experiment configs, held-out evaluation, sweeps, CSV and
//!   SVG output.

pub mod advantage_est;
pub mod diffgraph;
pub mod envs;
pub mod error;
pub mod harness;
pub mod meta;
pub mod netcore;
pub mod rollout;

pub use envs::{EnvKind, Task};
pub use error::{Error, Result};
pub use harness::ExperimentConfig;
pub use meta::{AlgoVariant, MetaConfig, MetaParams};
pub use netcore::{AdvantageParams, PolicyParams};
