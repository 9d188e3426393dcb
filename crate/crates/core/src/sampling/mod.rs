//! Real and imaginary rollouts, the linear reward baseline and GAE.

mod advantage;
mod rollout;
mod trajectory;

pub use advantage::{discounted_returns, gae, standardize, LinearBaseline, BASELINE_RIDGE};
pub use rollout::{rollout_model, rollout_real, Controller, DIVERGENCE_BOUND};
pub(crate) use trajectory::csv_error;
pub use trajectory::{Source, StackedBatch, Trajectory, TrajectoryBatch};
