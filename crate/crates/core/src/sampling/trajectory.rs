use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffcore::Matrix;
use crate::error::{check_dim, Error, Result};

/// Where a trajectory came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Source {
    Real,
    Model(usize),
}

/// One episode: `T + 1` states, `T` actions, rewards and log-probabilities.
///
/// Actions are stored as sampled (before clipping to the action box), since
/// log-probabilities refer to them.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Matrix,
    pub actions: Matrix,
    pub rewards: Vec<f64>,
    pub log_probs: Vec<f64>,
    pub source: Source,
    /// Ended early because a predicted state diverged.
    pub truncated: bool,
}

impl Trajectory {
    pub fn new(states: Matrix, actions: Matrix, rewards: Vec<f64>, log_probs: Vec<f64>, source: Source) -> Result<Self> {
        let t = Self {
            states,
            actions,
            rewards,
            log_probs,
            source,
            truncated: false,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.rewards.len();
        check_dim("trajectory states", t + 1, self.states.rows())?;
        check_dim("trajectory actions", t, self.actions.rows())?;
        check_dim("trajectory log-probs", t, self.log_probs.len())?;
        if self.rewards.iter().any(|r| !r.is_finite()) {
            return Err(Error::Numeric("non-finite reward in trajectory".into()));
        }
        Ok(())
    }

    /// Number of transitions `T`.
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn total_reward(&self) -> f64 {
        self.rewards.iter().sum()
    }
}

/// Trajectories and their states/actions stacked row-wise in trajectory order,
/// with the terminal state of each trajectory left out.
#[derive(Debug, Clone, PartialEq)]
pub struct StackedBatch {
    pub states: Matrix,
    pub actions: Matrix,
    pub log_probs: Vec<f64>,
}

/// Trajectories that share a source.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryBatch {
    pub trajectories: Vec<Trajectory>,
    pub model_index: Option<usize>,
}

impl TrajectoryBatch {
    pub fn new(trajectories: Vec<Trajectory>, model_index: Option<usize>) -> Result<Self> {
        let source = match model_index {
            Some(k) => Source::Model(k),
            None => Source::Real,
        };
        if trajectories.iter().any(|t| t.source != source) {
            return Err(Error::Precondition("trajectories in a batch must share their source".into()));
        }
        Ok(Self {
            trajectories,
            model_index,
        })
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn n_transitions(&self) -> usize {
        self.trajectories.iter().map(Trajectory::len).sum()
    }

    pub fn n_truncated(&self) -> usize {
        self.trajectories.iter().filter(|t| t.truncated).count()
    }

    /// Mean undiscounted return per trajectory.
    pub fn mean_return(&self) -> f64 {
        if self.is_empty() {
            return f64::NAN;
        }
        self.trajectories.iter().map(Trajectory::total_reward).sum::<f64>() / self.len() as f64
    }

    pub fn stacked(&self) -> StackedBatch {
        let n = self.n_transitions();
        let (sd, ad) = match self.trajectories.first() {
            Some(t) => (t.states.cols(), t.actions.cols()),
            None => (0, 0),
        };
        let mut states = Vec::with_capacity(n * sd);
        let mut actions = Vec::with_capacity(n * ad);
        let mut log_probs = Vec::with_capacity(n);
        for t in &self.trajectories {
            states.extend_from_slice(&t.states.as_slice()[..t.len() * sd]);
            actions.extend_from_slice(t.actions.as_slice());
            log_probs.extend_from_slice(&t.log_probs);
        }
        StackedBatch {
            states: Matrix::from_vec(n, sd, states).expect("consistent trajectory widths"),
            actions: Matrix::from_vec(n, ad, actions).expect("consistent trajectory widths"),
            log_probs,
        }
    }

    /// Writes one row per transition: `traj_id, t, s…, a…, r, logp`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
        let (sd, ad) = match self.trajectories.first() {
            Some(t) => (t.states.cols(), t.actions.cols()),
            None => (0, 0),
        };
        let mut header = vec!["traj_id".to_string(), "t".to_string()];
        header.extend((0..sd).map(|i| format!("s{i}")));
        header.extend((0..ad).map(|i| format!("a{i}")));
        header.extend(["r".to_string(), "logp".to_string()]);
        w.write_record(&header).map_err(csv_error)?;
        for (id, traj) in self.trajectories.iter().enumerate() {
            for t in 0..traj.len() {
                let mut row = vec![id.to_string(), t.to_string()];
                row.extend(traj.states.row(t).iter().map(|v| v.to_string()));
                row.extend(traj.actions.row(t).iter().map(|v| v.to_string()));
                row.push(traj.rewards[t].to_string());
                row.push(traj.log_probs[t].to_string());
                w.write_record(&row).map_err(csv_error)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

pub(crate) fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Config(format!("csv: {other:?}")),
    }
}
