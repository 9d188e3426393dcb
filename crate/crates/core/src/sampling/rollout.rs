use rand::Rng;

use super::trajectory::{Source, Trajectory, TrajectoryBatch};
use crate::diffcore::Matrix;
use crate::dynamics::Dynamics;
use crate::envs::{EnvKind, RealEnv};
use crate::error::{Error, Result};
use crate::policy::GaussianPolicy;
use crate::rng::StreamRng;

/// Imaginary states with `‖s‖∞` above this end their trajectory.
pub const DIVERGENCE_BOUND: f64 = 1e3;

/// Something that picks actions in the real environment.
#[derive(Debug, Clone, Copy)]
pub enum Controller<'a> {
    Policy(&'a GaussianPolicy),
    /// Uniform over the action box.
    UniformRandom,
}

impl Controller<'_> {
    fn act<R: Rng + ?Sized>(&self, kind: EnvKind, state: &[f64], rng: &mut R) -> Result<(Vec<f64>, f64)> {
        match self {
            Controller::Policy(p) => p.sample_action(state, rng),
            Controller::UniformRandom => {
                let spec = kind.spec();
                let mut log_volume = 0.0;
                let a = spec
                    .action_low
                    .iter()
                    .zip(&spec.action_high)
                    .map(|(&lo, &hi)| {
                        log_volume += (hi - lo).ln();
                        rng.gen_range(lo..=hi)
                    })
                    .collect();
                Ok((a, -log_volume))
            }
        }
    }
}

fn check_budget(n_transitions: usize, horizon: usize, env_horizon: usize) -> Result<usize> {
    if horizon == 0 || horizon > env_horizon {
        return Err(Error::Precondition(format!(
            "rollout horizon {horizon} must lie in 1..={env_horizon}"
        )));
    }
    if n_transitions == 0 || n_transitions % horizon != 0 {
        return Err(Error::Precondition(format!(
            "{n_transitions} transitions is not a positive multiple of the horizon {horizon}"
        )));
    }
    Ok(n_transitions / horizon)
}

/// Collects `n_transitions / horizon` real episodes. Episode `i` is driven by
/// `controllers[i % controllers.len()]`.
pub fn rollout_real<R: Rng + ?Sized>(
    env: &mut RealEnv,
    controllers: &[Controller<'_>],
    n_transitions: usize,
    horizon: usize,
    rng: &mut R,
) -> Result<TrajectoryBatch> {
    if controllers.is_empty() {
        return Err(Error::Precondition("rollout_real needs at least one controller".into()));
    }
    let kind = env.kind();
    let spec = kind.spec();
    let n_traj = check_budget(n_transitions, horizon, spec.horizon)?;
    let mut trajectories = Vec::with_capacity(n_traj);
    for i in 0..n_traj {
        let controller = controllers[i % controllers.len()];
        let mut s = env.reset(rng);
        let mut states = s.clone();
        let mut actions = Vec::with_capacity(horizon * spec.action_dim);
        let mut rewards = Vec::with_capacity(horizon);
        let mut log_probs = Vec::with_capacity(horizon);
        for t in 0..horizon {
            let (a, lp) = controller.act(kind, &s, rng)?;
            let step = env.step(&s, &a, t)?;
            actions.extend_from_slice(&a);
            rewards.push(step.reward);
            log_probs.push(lp);
            states.extend_from_slice(&step.next_state);
            s = step.next_state;
        }
        trajectories.push(Trajectory::new(
            Matrix::from_vec(horizon + 1, spec.state_dim, states)?,
            Matrix::from_vec(horizon, spec.action_dim, actions)?,
            rewards,
            log_probs,
            Source::Real,
        )?);
    }
    TrajectoryBatch::new(trajectories, None)
}

struct Partial {
    states: Vec<f64>,
    actions: Vec<f64>,
    rewards: Vec<f64>,
    log_probs: Vec<f64>,
    truncated: bool,
}

/// Imaginary rollouts of `policy` through `model`. Start states come from the
/// task's initial distribution and rewards from its known reward function;
/// the model sees clipped actions. All episodes advance together as one batch.
pub fn rollout_model(
    model: &dyn Dynamics,
    model_index: usize,
    policy: &GaussianPolicy,
    kind: EnvKind,
    n_transitions: usize,
    horizon: usize,
    rng: &mut StreamRng,
) -> Result<TrajectoryBatch> {
    let spec = kind.spec();
    let n_traj = check_budget(n_transitions, horizon, spec.horizon)?;
    let (sd, ad) = (spec.state_dim, spec.action_dim);
    let mut parts: Vec<Partial> = (0..n_traj)
        .map(|_| Partial {
            states: kind.reset(rng),
            actions: Vec::with_capacity(horizon * ad),
            rewards: Vec::with_capacity(horizon),
            log_probs: Vec::with_capacity(horizon),
            truncated: false,
        })
        .collect();
    let mut active: Vec<usize> = (0..n_traj).collect();
    let mut current = Matrix::from_vec(
        n_traj,
        sd,
        parts.iter().flat_map(|p| p.states.iter().copied()).collect(),
    )?;
    for _t in 0..horizon {
        if active.is_empty() {
            break;
        }
        let (actions, logp) = policy.sample_batch(&current, rng)?;
        let clipped = Matrix::from_vec(
            actions.rows(),
            ad,
            actions.iter_rows().flat_map(|a| kind.clip_action(a)).collect(),
        )?;
        let next = model.predict_batch(&current, &clipped, rng)?;
        let mut still = Vec::with_capacity(active.len());
        for (row, &i) in active.iter().enumerate() {
            let s_next = next.row(row);
            let p = &mut parts[i];
            if s_next.iter().any(|v| !v.is_finite() || v.abs() > DIVERGENCE_BOUND) {
                p.truncated = true;
                continue;
            }
            p.rewards.push(kind.reward(current.row(row), clipped.row(row)));
            p.actions.extend_from_slice(actions.row(row));
            p.log_probs.push(logp[row]);
            p.states.extend_from_slice(s_next);
            still.push(row);
        }
        active = still.iter().map(|&row| active[row]).collect();
        current = next.select_rows(&still);
    }
    let trajectories = parts
        .into_iter()
        .filter(|p| !p.rewards.is_empty())
        .map(|p| {
            let t = p.rewards.len();
            let mut traj = Trajectory::new(
                Matrix::from_vec(t + 1, sd, p.states)?,
                Matrix::from_vec(t, ad, p.actions)?,
                p.rewards,
                p.log_probs,
                Source::Model(model_index),
            )?;
            traj.truncated = p.truncated;
            Ok(traj)
        })
        .collect::<Result<Vec<_>>>()?;
    TrajectoryBatch::new(trajectories, Some(model_index))
}
