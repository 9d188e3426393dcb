//! Per-model inner adaptation, the meta-objective over adapted policies, its
//! gradient, and the trust-region outer step.

mod objective;
mod trpo;

pub use objective::{
    inner_adapt, inner_gradient, inner_objective, meta_gradient, meta_gradient_from_state, meta_surrogate, surrogate_gradient, surrogate_k, AdaptationData, FisherMode,
    MetaObjective, MetaPolicyState, ModelTask, PostUpdateData,
};
pub use trpo::{conjugate_gradient, trpo_step, TrpoConfig, TrpoOutcome, TrustRegionProblem};
