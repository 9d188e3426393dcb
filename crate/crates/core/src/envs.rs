//! Analytic control tasks with known reward functions.
//!
//! [`EnvKind`] carries what the learner is allowed to know about a task: its
//! shape, initial-state law, action box and reward. The true transition
//! function is only reachable through [`RealEnv`], which counts every call.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MdpSpec {
    pub state_dim: usize,
    pub action_dim: usize,
    pub action_low: Vec<f64>,
    pub action_high: Vec<f64>,
    pub horizon: usize,
    pub discount: f64,
}

impl MdpSpec {
    pub fn validate(&self) -> Result<()> {
        check_dim("action_low", self.action_dim, self.action_low.len())?;
        check_dim("action_high", self.action_dim, self.action_high.len())?;
        if self.state_dim == 0 || self.action_dim == 0 {
            return Err(Error::Config("state and action dimensions must be positive".into()));
        }
        if self.action_low.iter().zip(&self.action_high).any(|(l, h)| !(l < h)) {
            return Err(Error::Config("action_low must be below action_high".into()));
        }
        if self.horizon == 0 {
            return Err(Error::Config("horizon must be at least 1".into()));
        }
        if !(self.discount > 0.0 && self.discount <= 1.0) {
            return Err(Error::Config(format!("discount {} outside (0, 1]", self.discount)));
        }
        Ok(())
    }

    pub fn clip_action(&self, action: &[f64]) -> Vec<f64> {
        action
            .iter()
            .zip(self.action_low.iter().zip(&self.action_high))
            .map(|(a, (l, h))| a.clamp(*l, *h))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnvKind {
    /// Planar point, `s' = s + clip(a)`, `r = −‖s‖²`, `H = 30`.
    Point2d,
    /// Damped double integrator with position and velocity, `H = 50`.
    PointMass,
}

impl fmt::Display for EnvKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EnvKind::Point2d => "point2d",
            EnvKind::PointMass => "pointmass",
        })
    }
}

impl FromStr for EnvKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "point2d" => Ok(EnvKind::Point2d),
            "pointmass" => Ok(EnvKind::PointMass),
            other => Err(Error::Config(format!("unknown environment `{other}`"))),
        }
    }
}

pub const POINT2D_ACTION_BOUND: f64 = 0.1;
pub const POINT2D_START_BOUND: f64 = 2.0;
pub const POINTMASS_ACTION_BOUND: f64 = 0.5;
const POINTMASS_DAMPING: f64 = 0.9;
const POINTMASS_DT: f64 = 0.1;
const POINTMASS_CONTROL_COST: f64 = 0.05;

impl EnvKind {
    pub fn spec(&self) -> MdpSpec {
        match self {
            EnvKind::Point2d => MdpSpec {
                state_dim: 2,
                action_dim: 2,
                action_low: vec![-POINT2D_ACTION_BOUND; 2],
                action_high: vec![POINT2D_ACTION_BOUND; 2],
                horizon: 30,
                discount: 0.99,
            },
            EnvKind::PointMass => MdpSpec {
                state_dim: 4,
                action_dim: 2,
                action_low: vec![-POINTMASS_ACTION_BOUND; 2],
                action_high: vec![POINTMASS_ACTION_BOUND; 2],
                horizon: 50,
                discount: 0.99,
            },
        }
    }

    /// Draws an initial state. Point2d starts uniformly on `[−2, 2]²`; the
    /// point mass starts at rest at a uniform position in the same square.
    pub fn reset<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let b = POINT2D_START_BOUND;
        match self {
            EnvKind::Point2d => vec![rng.gen_range(-b..=b), rng.gen_range(-b..=b)],
            EnvKind::PointMass => vec![rng.gen_range(-b..=b), rng.gen_range(-b..=b), 0.0, 0.0],
        }
    }

    pub fn clip_action(&self, action: &[f64]) -> Vec<f64> {
        let bound = match self {
            EnvKind::Point2d => POINT2D_ACTION_BOUND,
            EnvKind::PointMass => POINTMASS_ACTION_BOUND,
        };
        action.iter().map(|a| a.clamp(-bound, bound)).collect()
    }

    /// Known reward `r(s_t, a_t)`, evaluated on the pre-transition state.
    pub fn reward(&self, state: &[f64], action: &[f64]) -> f64 {
        match self {
            EnvKind::Point2d => -(state[0] * state[0] + state[1] * state[1]),
            EnvKind::PointMass => {
                let a = self.clip_action(action);
                -(state[0] * state[0] + state[1] * state[1])
                    - POINTMASS_CONTROL_COST * (a[0] * a[0] + a[1] * a[1])
            }
        }
    }

    /// Hand-coded reference controller: full clipped speed toward the origin
    /// for the point, proportional-derivative control for the point mass.
    pub fn scripted_action(&self, state: &[f64]) -> Vec<f64> {
        match self {
            EnvKind::Point2d => self.clip_action(&[-state[0], -state[1]]),
            EnvKind::PointMass => {
                const KP: f64 = 2.0;
                const KD: f64 = 3.0;
                self.clip_action(&[
                    -KP * state[0] - KD * state[2],
                    -KP * state[1] - KD * state[3],
                ])
            }
        }
    }
}

/// Result of one real-environment transition.
#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub next_state: Vec<f64>,
    pub reward: f64,
    pub done: bool,
}

fn require_finite(what: &str, xs: &[f64]) -> Result<()> {
    if xs.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("non-finite {what}: {xs:?}")))
    }
}

fn point2d_step(state: &[f64], action: &[f64]) -> Result<(Vec<f64>, f64)> {
    check_dim("point2d state", 2, state.len())?;
    check_dim("point2d action", 2, action.len())?;
    require_finite("state", state)?;
    let a = EnvKind::Point2d.clip_action(action);
    let next = vec![state[0] + a[0], state[1] + a[1]];
    Ok((next, EnvKind::Point2d.reward(state, action)))
}

fn pointmass_step(state: &[f64], action: &[f64]) -> Result<(Vec<f64>, f64)> {
    check_dim("pointmass state", 4, state.len())?;
    check_dim("pointmass action", 2, action.len())?;
    require_finite("state", state)?;
    require_finite("action", action)?;
    let a = EnvKind::PointMass.clip_action(action);
    let vx = POINTMASS_DAMPING * state[2] + POINTMASS_DT * a[0];
    let vy = POINTMASS_DAMPING * state[3] + POINTMASS_DT * a[1];
    let next = vec![state[0] + POINTMASS_DT * vx, state[1] + POINTMASS_DT * vy, vx, vy];
    Ok((next, EnvKind::PointMass.reward(state, action)))
}

/// The true environment. Every transition is counted.
#[derive(Debug)]
pub struct RealEnv {
    kind: EnvKind,
    transitions: u64,
}

impl RealEnv {
    pub fn new(kind: EnvKind) -> Self {
        Self {
            kind,
            transitions: 0,
        }
    }

    pub fn kind(&self) -> EnvKind {
        self.kind
    }

    pub fn spec(&self) -> MdpSpec {
        self.kind.spec()
    }

    pub fn reset<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.kind.reset(rng)
    }

    /// Applies `action` in `state`; `t` is the index of this step within the
    /// episode and `done` is set when the horizon is reached.
    pub fn step(&mut self, state: &[f64], action: &[f64], t: usize) -> Result<Step> {
        let (next_state, reward) = match self.kind {
            EnvKind::Point2d => point2d_step(state, action)?,
            EnvKind::PointMass => pointmass_step(state, action)?,
        };
        self.transitions += 1;
        Ok(Step {
            next_state,
            reward,
            done: t + 1 >= self.kind.spec().horizon,
        })
    }

    /// Total transitions executed so far.
    pub fn transitions(&self) -> u64 {
        self.transitions
    }
}

/// Average undiscounted return of the scripted controller over `n_episodes`.
pub fn scripted_oracle_return<R: Rng + ?Sized>(kind: EnvKind, n_episodes: usize, rng: &mut R) -> Result<f64> {
    if n_episodes == 0 {
        return Err(Error::Precondition("n_episodes must be positive".into()));
    }
    let mut env = RealEnv::new(kind);
    let mut total = 0.0;
    for _ in 0..n_episodes {
        let s0 = env.reset(rng);
        total += scripted_episode_return(&mut env, s0)?;
    }
    Ok(total / n_episodes as f64)
}

/// Return of one scripted episode from a given start state.
pub fn scripted_episode_return(env: &mut RealEnv, start: Vec<f64>) -> Result<f64> {
    let kind = env.kind();
    let mut s = start;
    let mut ret = 0.0;
    for t in 0..kind.spec().horizon {
        let a = kind.scripted_action(&s);
        let step = env.step(&s, &a, t)?;
        ret += step.reward;
        s = step.next_state;
        if step.done {
            break;
        }
    }
    Ok(ret)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn point2d_examples() {
        let (n, r) = point2d_step(&[1.0, 1.0], &[0.1, -0.1]).unwrap();
        assert!((n[0] - 1.1).abs() < 1e-15 && (n[1] - 0.9).abs() < 1e-15);
        assert_eq!(r, -2.0);
        assert_eq!(point2d_step(&[0.0, 0.0], &[0.0, 0.0]).unwrap(), (vec![0.0, 0.0], 0.0));
        let (n, _) = point2d_step(&[1.0, 0.0], &[0.5, 0.0]).unwrap();
        assert!((n[0] - 1.1).abs() < 1e-15 && n[1] == 0.0);
        assert!(matches!(point2d_step(&[f64::NAN, 0.0], &[0.0, 0.0]), Err(Error::Numeric(_))));
    }

    #[test]
    fn pointmass_examples() {
        let (n, r) = pointmass_step(&[0.0; 4], &[0.0, 0.0]).unwrap();
        assert_eq!((n, r), (vec![0.0; 4], 0.0));
        let (n, r) = pointmass_step(&[1.0, 0.0, 0.0, 0.0], &[0.5, 0.0]).unwrap();
        assert!((n[2] - 0.05).abs() < 1e-15);
        assert!((n[0] - 1.005).abs() < 1e-15);
        assert!((r + 1.0125).abs() < 1e-15);
        // zero action: velocity decays by 0.9
        let (n, _) = pointmass_step(&[0.3, -0.2, 1.0, -2.0], &[0.0, 0.0]).unwrap();
        assert!((n[2] - 0.9).abs() < 1e-15 && (n[3] + 1.8).abs() < 1e-15);
    }

    #[test]
    fn done_only_at_horizon() {
        let mut env = RealEnv::new(EnvKind::Point2d);
        let mut s = vec![0.5, 0.5];
        for t in 0..30 {
            let step = env.step(&s, &[0.0, 0.0], t).unwrap();
            assert_eq!(step.done, t == 29);
            s = step.next_state;
        }
        assert_eq!(env.transitions(), 30);
    }

    #[test]
    fn reset_is_deterministic_and_bounded() {
        let a = EnvKind::Point2d.reset(&mut ChaCha8Rng::seed_from_u64(3));
        let b = EnvKind::Point2d.reset(&mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(a, b);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..1000 {
            let s = EnvKind::Point2d.reset(&mut rng);
            assert!(s.iter().all(|x| (-2.0..=2.0).contains(x)));
        }
    }

    #[test]
    fn scripted_return_from_origin_is_zero() {
        let mut env = RealEnv::new(EnvKind::Point2d);
        assert_eq!(scripted_episode_return(&mut env, vec![0.0, 0.0]).unwrap(), 0.0);
        let mut env = RealEnv::new(EnvKind::PointMass);
        assert_eq!(scripted_episode_return(&mut env, vec![0.0; 4]).unwrap(), 0.0);
    }

    #[test]
    fn spec_validation() {
        assert!(EnvKind::Point2d.spec().validate().is_ok());
        let mut s = EnvKind::PointMass.spec();
        s.action_low[0] = 1.0;
        assert!(s.validate().is_err());
        assert_eq!("pointmass".parse::<EnvKind>().unwrap(), EnvKind::PointMass);
        assert!("cheetah".parse::<EnvKind>().is_err());
    }
}
