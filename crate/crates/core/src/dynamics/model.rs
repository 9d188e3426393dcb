use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::normalizer::Normalizer;
use crate::diffcore::{mlp_tape, Activation, Matrix, MlpSpec, ParameterVector, Tape, Var};
use crate::error::{check_dim, Error, Result};
use crate::rng::{stream, tag, StreamRng};

/// Anything that maps a batch of `(s, a)` to next states.
pub trait Dynamics {
    fn state_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    fn predict_batch(&self, states: &Matrix, actions: &Matrix, rng: &mut StreamRng) -> Result<Matrix>;
}

/// Delta-state network `s' = s + denorm_out(net(norm_in(s ⧺ a)))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicsModel {
    spec: MlpSpec,
    params: ParameterVector,
    in_norm: Normalizer,
    out_norm: Normalizer,
}

impl DynamicsModel {
    pub fn init<R: Rng + ?Sized>(state_dim: usize, action_dim: usize, hidden: &[usize], rng: &mut R) -> Result<Self> {
        let spec = MlpSpec::new(state_dim + action_dim, hidden, state_dim, Activation::Relu, true)?;
        let params = spec.init(rng);
        Ok(Self {
            spec,
            params,
            in_norm: Normalizer::identity(state_dim + action_dim),
            out_norm: Normalizer::identity(state_dim),
        })
    }

    pub fn from_parts(spec: MlpSpec, params: ParameterVector, in_norm: Normalizer, out_norm: Normalizer) -> Result<Self> {
        spec.check_layout(params.layout())?;
        if spec.input_dim <= spec.output_dim {
            return Err(Error::Config("dynamics input must hold state and action".into()));
        }
        check_dim("input normalizer", spec.input_dim, in_norm.dim())?;
        check_dim("output normalizer", spec.output_dim, out_norm.dim())?;
        Ok(Self {
            spec,
            params,
            in_norm,
            out_norm,
        })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParameterVector {
        &self.params
    }

    pub fn in_norm(&self) -> &Normalizer {
        &self.in_norm
    }

    pub fn out_norm(&self) -> &Normalizer {
        &self.out_norm
    }

    pub(crate) fn set_params(&mut self, params: ParameterVector) {
        self.params = params;
    }

    pub(crate) fn set_normalizers(&mut self, in_norm: Normalizer, out_norm: Normalizer) {
        self.in_norm = in_norm;
        self.out_norm = out_norm;
    }

    pub fn state_dim(&self) -> usize {
        self.spec.output_dim
    }

    pub fn action_dim(&self) -> usize {
        self.spec.input_dim - self.spec.output_dim
    }

    /// Normalized network input for a batch.
    pub fn network_input(&self, states: &Matrix, actions: &Matrix) -> Result<Matrix> {
        check_dim("dynamics state", self.state_dim(), states.cols())?;
        check_dim("dynamics action", self.action_dim(), actions.cols())?;
        self.in_norm.normalize(&states.hcat(actions)?)
    }

    /// Network output (normalized delta) for normalized inputs, on a tape.
    pub(crate) fn net_tape(&self, tape: &mut Tape<'_>, normalized_input: Var) -> Result<Var> {
        mlp_tape(tape, &self.spec, normalized_input)
    }

    /// Unperturbed next-state prediction.
    pub fn predict_batch(&self, states: &Matrix, actions: &Matrix) -> Result<Matrix> {
        let x = self.network_input(states, actions)?;
        let mut tape = Tape::for_params(&self.params);
        let xv = tape.constant(x);
        let y = self.net_tape(&mut tape, xv)?;
        let mut next = self.out_norm.denormalize(tape.value(y))?;
        next.add_assign(states);
        if !next.is_finite() {
            return Err(Error::Numeric("non-finite dynamics prediction".into()));
        }
        Ok(next)
    }

    pub fn predict(&self, state: &[f64], action: &[f64]) -> Result<Vec<f64>> {
        Ok(self
            .predict_batch(&Matrix::row_vector(state), &Matrix::row_vector(action))?
            .into_vec())
    }
}

/// Biased observation noise `N(b_k, σ²)` added to every prediction of model `k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Perturbation {
    pub b_max: f64,
    pub noise_std: f64,
    pub biases: Vec<f64>,
}

impl Perturbation {
    pub fn new(b_max: f64, noise_std: f64, n_models: usize) -> Result<Self> {
        if !(b_max >= 0.0 && noise_std >= 0.0) {
            return Err(Error::Config("perturbation b_max and noise_std must be non-negative".into()));
        }
        Ok(Self {
            b_max,
            noise_std,
            biases: vec![0.0; n_models],
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEnsemble {
    models: Vec<DynamicsModel>,
    perturbation: Option<Perturbation>,
}

impl ModelEnsemble {
    /// `k` models with independent initializations derived from `seed`.
    pub fn init(k: usize, state_dim: usize, action_dim: usize, hidden: &[usize], seed: u64) -> Result<Self> {
        if k == 0 {
            return Err(Error::Config("ensemble needs at least one model".into()));
        }
        let models = (0..k)
            .map(|i| DynamicsModel::init(state_dim, action_dim, hidden, &mut stream(seed, &[tag::MODEL_INIT, i as u64])))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            models,
            perturbation: None,
        })
    }

    pub fn from_models(models: Vec<DynamicsModel>) -> Result<Self> {
        let first = models
            .first()
            .ok_or_else(|| Error::Config("ensemble needs at least one model".into()))?;
        if models.iter().any(|m| m.spec != first.spec) {
            return Err(Error::Config("ensemble members must share a network spec".into()));
        }
        Ok(Self {
            models,
            perturbation: None,
        })
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    pub fn models(&self) -> &[DynamicsModel] {
        &self.models
    }

    pub(crate) fn models_mut(&mut self) -> &mut [DynamicsModel] {
        &mut self.models
    }

    pub fn model(&self, k: usize) -> &DynamicsModel {
        &self.models[k]
    }

    pub fn perturbation(&self) -> Option<&Perturbation> {
        self.perturbation.as_ref()
    }

    pub fn set_perturbation(&mut self, p: Option<Perturbation>) -> Result<()> {
        if let Some(p) = &p {
            check_dim("perturbation biases", self.len(), p.biases.len())?;
            if p.biases.iter().any(|b| !(0.0..=p.b_max).contains(b)) {
                return Err(Error::Config("perturbation bias outside [0, b_max]".into()));
            }
        }
        self.perturbation = p;
        Ok(())
    }

    /// Draws a fresh `b ~ U(0, b_max)` for every model.
    pub fn resample_perturbation<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<()> {
        let p = self
            .perturbation
            .as_mut()
            .ok_or_else(|| Error::Precondition("no perturbation configured".into()))?;
        for b in &mut p.biases {
            *b = if p.b_max > 0.0 { rng.gen_range(0.0..=p.b_max) } else { 0.0 };
        }
        Ok(())
    }

    /// Prediction of model `k`, perturbed if a perturbation is configured.
    pub fn predict_batch<R: Rng + ?Sized>(&self, k: usize, states: &Matrix, actions: &Matrix, rng: &mut R) -> Result<Matrix> {
        let mut next = self.models[k].predict_batch(states, actions).map_err(|e| e.in_model(k))?;
        if let Some(p) = &self.perturbation {
            let b = p.biases[k];
            for v in next.as_mut_slice() {
                let z: f64 = if p.noise_std > 0.0 { rng.sample(StandardNormal) } else { 0.0 };
                *v += b + p.noise_std * z;
            }
        }
        Ok(next)
    }

    /// Per-coordinate population standard deviation of the unperturbed
    /// predictions across members.
    pub fn ensemble_std(&self, state: &[f64], action: &[f64]) -> Result<Vec<f64>> {
        let s = Matrix::row_vector(state);
        let a = Matrix::row_vector(action);
        Ok(self.ensemble_std_batch(&s, &a)?.into_vec())
    }

    pub fn ensemble_std_batch(&self, states: &Matrix, actions: &Matrix) -> Result<Matrix> {
        if self.len() < 2 {
            return Err(Error::Precondition("ensemble std needs at least two models".into()));
        }
        let preds = self
            .models
            .iter()
            .enumerate()
            .map(|(k, m)| m.predict_batch(states, actions).map_err(|e| e.in_model(k)))
            .collect::<Result<Vec<_>>>()?;
        let k = preds.len() as f64;
        let (rows, cols) = preds[0].shape();
        let mut out = Matrix::zeros(rows, cols);
        for i in 0..rows * cols {
            let mean = preds.iter().map(|p| p.as_slice()[i]).sum::<f64>() / k;
            let var = preds.iter().map(|p| (p.as_slice()[i] - mean).powi(2)).sum::<f64>() / k;
            out.as_mut_slice()[i] = var.sqrt();
        }
        Ok(out)
    }

    /// A single member as a [`Dynamics`] view, carrying this ensemble's perturbation.
    pub fn member(&self, k: usize) -> EnsembleMember<'_> {
        EnsembleMember { ensemble: self, k }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EnsembleMember<'a> {
    ensemble: &'a ModelEnsemble,
    k: usize,
}

impl Dynamics for EnsembleMember<'_> {
    fn state_dim(&self) -> usize {
        self.ensemble.models[self.k].state_dim()
    }

    fn action_dim(&self) -> usize {
        self.ensemble.models[self.k].action_dim()
    }

    fn predict_batch(&self, states: &Matrix, actions: &Matrix, rng: &mut StreamRng) -> Result<Matrix> {
        self.ensemble.predict_batch(self.k, states, actions, rng)
    }
}

impl Dynamics for DynamicsModel {
    fn state_dim(&self) -> usize {
        DynamicsModel::state_dim(self)
    }

    fn action_dim(&self) -> usize {
        DynamicsModel::action_dim(self)
    }

    fn predict_batch(&self, states: &Matrix, actions: &Matrix, _rng: &mut StreamRng) -> Result<Matrix> {
        DynamicsModel::predict_batch(self, states, actions)
    }
}
