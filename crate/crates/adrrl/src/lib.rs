//! Adversarially guided trajectory diffusion for robust reinforcement learning.
//!
//! The crate trains a trajectory-level denoising diffusion world model together
//! with a cumulative-return predictor, then steers the reverse diffusion toward
//! low-return trajectories under a per-step budget so that the induced
//! perturbation of the model distribution stays inside the CVaR risk envelope.
//! Policies trained on those adversarial synthetic trajectories are more robust
//! to shifts in the physical parameters of the environment.
//!
//! Module map:
//! - [`nn`]: minimal MLP with reverse-mode gradients and Adam.
//! - [`env`]: parameterized toy control environments, trajectories, replay buffer.
//! - [`diffusion`]: cosine schedule, epsilon-prediction training, ancestral sampling.
//! - [`return_model`]: return predictor over noisy trajectories plus a per-step reward model.
//! - [`guidance`]: adversarial guidance scales, guided steps, envelope weights.
//! - [`cvar`]: VaR/CVaR estimators and the dual-form oracle.
//! - [`policy`]: Gaussian policy, critic, A2C with GAE.
//! - [`orchestrator`]: the outer training loop, checkpoints, config, evaluation.
//! - [`eval_suite`]: packaged robustness experiments and the property battery.
//! - [`verify`]: runtime property suites backing the `verify` CLI subcommand.

pub mod checkpoint;
pub mod config;
pub mod cvar;
pub mod diffusion;
pub mod env;
pub mod eval_suite;
pub mod guidance;
pub mod nn;
pub mod orchestrator;
pub mod policy;
pub mod return_model;
pub mod stats;
pub mod verify;

pub use config::RunConfig;
pub use env::{EnvKind, EnvParams, Environment, ReplayBuffer, Trajectory};
pub use guidance::GuidanceConfig;
pub use nn::{Activation, Adam, MlpConfig, MlpModel};
