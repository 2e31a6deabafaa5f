//! Safe model-based reinforcement learning toolkit.
//!
//! A parametric model-predictive controller with learnable
//! control-barrier-function constraints serves as the value-function
//! approximator; Q-learning tunes the MPC cost together with the
//! class-K decay parametrization (optimal-decay scalars, a feedforward
//! network, or an Elman recurrent network) on obstacle-avoidance tasks.
//!
//! Start from the `examples/` directory: each example exercises one
//! capability (plant rollouts, solving the MPC variants, gradient
//! checks, training, evaluation). The `safe-mpc-rl` binary wraps the
//! same entry points behind `train`, `evaluate` and `check-gradients`
//! subcommands.

pub mod barrier;
pub mod env;
pub mod error;
pub mod neural;
pub mod mpc;
pub mod nlp;
pub mod trainer;

pub use error::{Error, Result};
