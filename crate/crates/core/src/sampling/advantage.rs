use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::trajectory::{Trajectory, TrajectoryBatch};
use crate::error::{Error, Result};

/// Ridge added to the baseline's normal equations.
pub const BASELINE_RIDGE: f64 = 1e-5;

/// Discounted returns-to-go `Σ_{t'≥t} γ^{t'−t} r_{t'}`.
pub fn discounted_returns(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for t in (0..rewards.len()).rev() {
        acc = rewards[t] + gamma * acc;
        out[t] = acc;
    }
    out
}

/// Linear value estimate on `[s, s⊙s, t/H, (t/H)², (t/H)³, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearBaseline {
    pub weights: Vec<f64>,
    pub horizon: usize,
}

impl LinearBaseline {
    pub fn zeros(state_dim: usize, horizon: usize) -> Self {
        Self {
            weights: vec![0.0; Self::n_features(state_dim)],
            horizon,
        }
    }

    pub fn n_features(state_dim: usize) -> usize {
        2 * state_dim + 4
    }

    pub fn features(state: &[f64], t: usize, horizon: usize) -> Vec<f64> {
        let u = t as f64 / horizon as f64;
        let mut f = Vec::with_capacity(Self::n_features(state.len()));
        f.extend_from_slice(state);
        f.extend(state.iter().map(|s| s * s));
        f.extend([u, u * u, u * u * u, 1.0]);
        f
    }

    /// Ridge least squares of discounted returns-to-go on the features of
    /// every non-terminal state in `batch`.
    pub fn fit(batch: &TrajectoryBatch, gamma: f64, horizon: usize) -> Result<Self> {
        let state_dim = match batch.trajectories.first() {
            Some(t) if batch.n_transitions() > 0 => t.states.cols(),
            _ => return Err(Error::Precondition("cannot fit a baseline to an empty batch".into())),
        };
        let p = Self::n_features(state_dim);
        let mut xtx = DMatrix::<f64>::zeros(p, p);
        let mut xty = DVector::<f64>::zeros(p);
        for traj in &batch.trajectories {
            let returns = discounted_returns(&traj.rewards, gamma);
            for (t, g) in returns.iter().enumerate() {
                let f = DVector::from_vec(Self::features(traj.states.row(t), t, horizon));
                xtx.ger(1.0, &f, &f, 1.0);
                xty.axpy(*g, &f, 1.0);
            }
        }
        for i in 0..p {
            xtx[(i, i)] += BASELINE_RIDGE;
        }
        let w = xtx
            .cholesky()
            .ok_or_else(|| Error::Numeric("baseline normal equations are not positive definite".into()))?
            .solve(&xty);
        if w.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite baseline weights".into()));
        }
        Ok(Self {
            weights: w.as_slice().to_vec(),
            horizon,
        })
    }

    pub fn predict(&self, state: &[f64], t: usize) -> f64 {
        Self::features(state, t, self.horizon)
            .iter()
            .zip(&self.weights)
            .map(|(f, w)| f * w)
            .sum()
    }

    /// Baseline values of the non-terminal states of one trajectory.
    pub fn values(&self, traj: &Trajectory) -> Vec<f64> {
        (0..traj.len()).map(|t| self.predict(traj.states.row(t), t)).collect()
    }
}

/// Generalized advantage estimates, flattened in trajectory order. The value
/// after the last step of every trajectory is taken as zero.
pub fn gae(batch: &TrajectoryBatch, baseline: &LinearBaseline, gamma: f64, lambda: f64) -> Result<Vec<f64>> {
    if !(gamma > 0.0 && gamma <= 1.0) || !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Precondition(format!(
            "gae needs γ ∈ (0, 1] and λ ∈ [0, 1], got γ = {gamma}, λ = {lambda}"
        )));
    }
    let mut out = Vec::with_capacity(batch.n_transitions());
    for traj in &batch.trajectories {
        let v = baseline.values(traj);
        let n = traj.len();
        let mut adv = vec![0.0; n];
        let mut acc = 0.0;
        for t in (0..n).rev() {
            let v_next = if t + 1 < n { v[t + 1] } else { 0.0 };
            let delta = traj.rewards[t] + gamma * v_next - v[t];
            acc = delta + gamma * lambda * acc;
            adv[t] = acc;
        }
        out.extend(adv);
    }
    Ok(out)
}

/// Shifts and scales to mean 0 and (population) standard deviation 1.
pub fn standardize(values: &mut [f64]) {
    if values.is_empty() {
        return;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
    for v in values.iter_mut() {
        *v = (*v - mean) / (std + 1e-8);
    }
}
