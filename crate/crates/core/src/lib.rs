//! Fully decentralized model-based policy optimization for multi-agent
//! reinforcement learning: networks, environments, PPO learners, latent
//! environment models, the training loop and its diagnostics.
//!
//! Numerics are generic over [`Scalar`] (`f32` or `f64`); the aliases below
//! fix the scalar to `f64`.

pub mod envs;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod ppo;
pub mod rng;
pub mod rollout;
pub mod scalar;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Matrix = nn::Matrix<f64>;
pub type Mlp = nn::Mlp<f64>;
pub type Ensemble = nn::Ensemble<f64>;
pub type Adam = nn::Adam<f64>;
pub type AgentPolicy = ppo::AgentPolicy<f64>;
pub type Batch = ppo::Batch<f64>;
pub type EnvModel = model::EnvModel<f64>;
pub type RunState = trainer::RunState<f64>;
