use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::buffer::TransitionBuffer;
use super::model::{DynamicsModel, ModelEnsemble};
use super::normalizer::Normalizer;
use crate::diffcore::{grad, Matrix, ParameterVector, Tape};
use crate::error::{Error, Result};
use crate::rng::{stream, tag};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DynamicsTrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub validation_fraction: f64,
    /// Weight on the previous value in the rolling validation average.
    pub persistence: f64,
    /// Epochs without improvement of the rolling average before stopping.
    pub patience: usize,
}

impl Default for DynamicsTrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 500,
            max_epochs: 100,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            validation_fraction: 0.2,
            persistence: 0.95,
            patience: 5,
        }
    }
}

impl DynamicsTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return Err(Error::Config("dynamics batch_size, max_epochs and patience must be positive".into()));
        }
        if !(0.0 < self.validation_fraction && self.validation_fraction < 1.0) {
            return Err(Error::Config("validation_fraction must lie in (0, 1)".into()));
        }
        if !(0.0..1.0).contains(&self.persistence) {
            return Err(Error::Config("persistence must lie in [0, 1)".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        Ok(())
    }
}

/// Adam on a flat parameter vector.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    /// One descent step along `grad`.
    pub fn step(&mut self, params: &ParameterVector, grad: &ParameterVector) -> Result<ParameterVector> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        let mut out = params.values().to_vec();
        for (i, (p, g)) in out.iter_mut().zip(grad.values()).enumerate() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            *p -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
        params.with_values(out)
    }
}

/// Rolling-average early stopping: `r ← p·r + (1−p)·v` after every epoch;
/// stop once `r` has not reached a new minimum for `patience` epochs.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    persistence: f64,
    patience: usize,
    rolling: Option<f64>,
    best: f64,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(persistence: f64, patience: usize) -> Self {
        Self {
            persistence,
            patience,
            rolling: None,
            best: f64::INFINITY,
            stale: 0,
        }
    }

    pub fn rolling(&self) -> Option<f64> {
        self.rolling
    }

    /// Records one epoch's validation loss; returns `true` when training should stop.
    pub fn observe(&mut self, val_loss: f64) -> bool {
        let r = match self.rolling {
            None => val_loss,
            Some(r) => self.persistence * r + (1.0 - self.persistence) * val_loss,
        };
        self.rolling = Some(r);
        if r < self.best {
            self.best = r;
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        self.stale >= self.patience
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelTrainReport {
    pub epochs: usize,
    pub stopped_early: bool,
    /// Validation loss (normalized output space) after the last epoch.
    pub final_val_loss: f64,
    pub val_losses: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub models: Vec<ModelTrainReport>,
}

impl TrainReport {
    pub fn mean_val_loss(&self) -> f64 {
        self.models.iter().map(|m| m.final_val_loss).sum::<f64>() / self.models.len() as f64
    }

    pub fn max_epochs_reached(&self) -> bool {
        self.models.iter().any(|m| !m.stopped_early)
    }
}

struct Split {
    train_x: Matrix,
    train_y: Matrix,
    val_x: Matrix,
    val_y: Matrix,
}

/// Mean over rows of the squared error between network output and targets.
fn batch_loss(model: &DynamicsModel, params: &ParameterVector, x: &Matrix, y: &Matrix) -> Result<(f64, ParameterVector)> {
    grad(params, |t: &mut Tape<'_>| {
        let xv = t.constant(x.clone());
        let out = model.net_tape(t, xv)?;
        let target = t.constant(y.clone());
        let diff = t.sub(out, target)?;
        let sq = t.square(diff);
        let per_row = t.sum_rows(sq);
        t.mean(per_row)
    })
}

fn eval_loss(model: &DynamicsModel, x: &Matrix, y: &Matrix) -> Result<f64> {
    crate::diffcore::value(model.params(), |t| {
        let xv = t.constant(x.clone());
        let out = model.net_tape(t, xv)?;
        let target = t.constant(y.clone());
        let diff = t.sub(out, target)?;
        let sq = t.square(diff);
        let per_row = t.sum_rows(sq);
        t.mean(per_row)
    })
}

/// Bootstrap subset, 80/20 split, normalizers refit on the subset.
fn prepare<R: Rng + ?Sized>(
    model: &mut DynamicsModel,
    buffer: &TransitionBuffer,
    cfg: &DynamicsTrainConfig,
    rng: &mut R,
) -> Result<Split> {
    let n = buffer.len();
    let mut idx: Vec<usize> = (0..n).map(|_| rng.gen_range(0..n)).collect();
    idx.shuffle(rng);
    let n_val = ((n as f64 * cfg.validation_fraction).round() as usize).clamp(1, n.max(2) - 1);
    let (s, a, s_next) = buffer.gather(&idx);
    let inputs = s.hcat(&a)?;
    let deltas = s_next.zip_map(&s, |x, y| x - y);
    model.set_normalizers(Normalizer::fit(&inputs)?, Normalizer::fit(&deltas)?);
    let x = model.in_norm().normalize(&inputs)?;
    let y = model.out_norm().normalize(&deltas)?;
    let n_train = n - n_val;
    let train_rows: Vec<usize> = (0..n_train).collect();
    let val_rows: Vec<usize> = (n_train..n).collect();
    let (train_x, train_y) = if n_train == 0 {
        // a single transition: train and validate on it
        (x.clone(), y.clone())
    } else {
        (x.select_rows(&train_rows), y.select_rows(&train_rows))
    };
    Ok(Split {
        train_x,
        train_y,
        val_x: x.select_rows(&val_rows),
        val_y: y.select_rows(&val_rows),
    })
}

/// Trains one model from its current (warm-start) parameters.
pub fn train_model<R: Rng + ?Sized>(
    model: &mut DynamicsModel,
    buffer: &TransitionBuffer,
    cfg: &DynamicsTrainConfig,
    rng: &mut R,
) -> Result<ModelTrainReport> {
    let split = prepare(model, buffer, cfg, rng)?;
    let mut adam = Adam::new(model.params().len(), cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps);
    let mut stopper = EarlyStopping::new(cfg.persistence, cfg.patience);
    let mut order: Vec<usize> = (0..split.train_x.rows()).collect();
    let mut val_losses = Vec::new();
    let mut stopped_early = false;
    for _epoch in 0..cfg.max_epochs {
        order.shuffle(rng);
        for chunk in order.chunks(cfg.batch_size) {
            let bx = split.train_x.select_rows(chunk);
            let by = split.train_y.select_rows(chunk);
            let (_, g) = batch_loss(model, model.params(), &bx, &by)?;
            let next = adam.step(model.params(), &g)?;
            model.set_params(next);
        }
        let v = eval_loss(model, &split.val_x, &split.val_y)?;
        if !v.is_finite() {
            return Err(Error::Numeric("non-finite validation loss".into()));
        }
        val_losses.push(v);
        if stopper.observe(v) {
            stopped_early = true;
            break;
        }
    }
    Ok(ModelTrainReport {
        epochs: val_losses.len(),
        stopped_early,
        final_val_loss: *val_losses.last().expect("max_epochs > 0"),
        val_losses,
    })
}

/// Trains every member on its own bootstrap of `buffer`. Member `k` draws
/// from the stream `(seed, k)`, so results do not depend on scheduling.
pub fn train_ensemble(
    ensemble: &mut ModelEnsemble,
    buffer: &TransitionBuffer,
    cfg: &DynamicsTrainConfig,
    seed: u64,
) -> Result<TrainReport> {
    cfg.validate()?;
    if buffer.is_empty() {
        return Err(Error::Precondition("cannot train dynamics on an empty buffer".into()));
    }
    let models = ensemble
        .models_mut()
        .iter_mut()
        .enumerate()
        .map(|(k, m)| {
            let mut rng = stream(seed, &[tag::MODEL_TRAIN, k as u64]);
            train_model(m, buffer, cfg, &mut rng).map_err(|e| e.in_model(k))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TrainReport { models })
}
