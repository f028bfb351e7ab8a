//! Latent temporal-consistency reinforcement learning on classic-control tasks.
//!
//! The crate is organised bottom-up:
//!
//! - [`math`]: precision-generic scalar trait and a small row-major matrix type.
//! - [`autodiff`]: tape-based reverse-mode differentiation over batched matrix
//!   ops, plus named parameter storage with Adam and binary serialization.
//! - [`envs`]: built-in physics tasks (pendulum, cartpole, point mass).
//! - [`replay`]: episode-aware buffer with uniform fixed-length segment sampling.
//! - [`networks`]: encoder / latent dynamics / double-Q / policy heads over a
//!   shared parameter set, with momentum (EMA) target copies.
//! - [`repr`]: multi-step latent consistency + reward loss and its update step.
//! - [`agent`]: exploration schedule, n-step TD critic and policy updates.
//! - [`planner`]: MPPI over any batched rollout model (latent or ensemble).
//! - [`baselines`]: observation-space ensembles (deterministic and Gaussian).
//! - [`config`] / [`metrics`] / [`checkpoint`] / [`harness`]: run
//!   configuration, JSONL metrics, resumable checkpoints, and training loops.

pub mod agent;
pub mod autodiff;
pub mod baselines;
pub mod checkpoint;
pub mod config;
pub mod envs;
pub mod error;
pub mod harness;
pub mod math;
pub mod metrics;
pub mod networks;
pub mod planner;
pub mod replay;
pub mod repr;
pub mod rngs;

pub use error::{Error, Result};
