//! Model-based meta-policy optimization: an ensemble of learned dynamics
//! models, one policy-gradient adaptation step per model, and a trust-region
//! meta-update, all on small analytic control tasks.

pub mod diffcore;
pub mod dynamics;
pub mod envs;
pub mod error;
pub mod harness;
pub mod metaopt;
pub mod orchestrator;
pub mod policy;
pub mod rng;
pub mod sampling;

pub use error::{Error, ErrorKind, Result};
