//! Deep reinforcement learning engine for portfolio trading.
//!
//! The crate is self-contained: it ships its own f64 tensor ops with
//! reverse-mode gradients ([`tensor`]), technical-indicator computation
//! ([`indicators`]), bar ingestion and feature-frame assembly ([`data`]), a
//! sliding-window market MDP ([`env`]), three actor-critic architectures
//! ([`policy`]) and a PPO trainer ([`ppo`]).
//!
//! Everything is deterministic: all randomness flows through the seeded
//! [`rng::Rng`] and every reduction runs in a fixed order, so a seed pins the
//! full training trajectory bit for bit. The `parallel` feature (on by
//! default) distributes independent work across threads with rayon without
//! changing any result.

pub mod data;
pub mod env;
pub mod error;
pub mod indicators;
pub mod policy;
pub mod ppo;
pub mod rng;
pub mod tensor;

mod par;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::Tensor;
