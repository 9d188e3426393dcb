//! Diagonal Gaussian policy: network mean, state-independent learned log-std.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffcore::{mlp_tape, Activation, Layout, Matrix, MlpSpec, ParamBlock, ParameterVector, Tape, Var};
use crate::error::{check_dim, Error, Result};

pub const LOG_STD_MIN: f64 = -20.0;
pub const LOG_STD_MAX: f64 = 2.0;
pub const LOG_STD_BLOCK: &str = "log_std";

const HALF_LOG_2PI: f64 = 0.918_938_533_204_672_7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianPolicy {
    spec: MlpSpec,
    params: ParameterVector,
}

impl GaussianPolicy {
    /// Default tanh mean network for a task.
    pub fn default_spec(state_dim: usize, action_dim: usize, hidden: &[usize]) -> Result<MlpSpec> {
        MlpSpec::new(state_dim, hidden, action_dim, Activation::Tanh, false)
    }

    pub fn layout(spec: &MlpSpec) -> Layout {
        spec.layout()
            .extend(&[ParamBlock::new(LOG_STD_BLOCK, &[spec.output_dim])])
            .expect("log_std does not collide with layer names")
    }

    /// Glorot-initialized mean network, `log_std = 0`.
    pub fn init<R: Rng + ?Sized>(spec: MlpSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let mut values = spec.init_values(rng);
        values.extend(std::iter::repeat(0.0).take(spec.output_dim));
        let params = ParameterVector::new(Arc::new(Self::layout(&spec)), values)?;
        Ok(Self { spec, params })
    }

    pub fn from_params(spec: MlpSpec, params: ParameterVector) -> Result<Self> {
        spec.check_layout(params.layout())?;
        let (_, b) = params
            .layout()
            .locate(LOG_STD_BLOCK)
            .ok_or_else(|| Error::Config("policy parameters lack `log_std`".into()))?;
        check_dim("log_std", spec.output_dim, b.numel())?;
        Ok(Self { spec, params })
    }

    /// Same network, different parameters.
    pub fn with_params(&self, params: ParameterVector) -> Result<Self> {
        Self::from_params(self.spec.clone(), params)
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParameterVector {
        &self.params
    }

    pub fn state_dim(&self) -> usize {
        self.spec.input_dim
    }

    pub fn action_dim(&self) -> usize {
        self.spec.output_dim
    }

    /// Effective (bounded) log standard deviations.
    pub fn log_std(&self) -> Vec<f64> {
        self.params
            .block(LOG_STD_BLOCK)
            .expect("checked at construction")
            .iter()
            .map(|x| x.clamp(LOG_STD_MIN, LOG_STD_MAX))
            .collect()
    }

    pub fn std(&self) -> Vec<f64> {
        self.log_std().into_iter().map(f64::exp).collect()
    }

    pub fn mean_batch(&self, states: &Matrix) -> Result<Matrix> {
        check_dim("policy state", self.state_dim(), states.cols())?;
        let mut tape = Tape::for_params(&self.params);
        let s = tape.constant(states.clone());
        let mu = mlp_tape(&mut tape, &self.spec, s)?;
        Ok(tape.value(mu).clone())
    }

    pub fn mean(&self, state: &[f64]) -> Result<Vec<f64>> {
        Ok(self.mean_batch(&Matrix::row_vector(state))?.into_vec())
    }

    /// Draws `a = μ(s) + σ ⊙ ε` for every row of `states`; returns actions
    /// and their log-densities.
    pub fn sample_batch<R: Rng + ?Sized>(&self, states: &Matrix, rng: &mut R) -> Result<(Matrix, Vec<f64>)> {
        let mut actions = self.mean_batch(states)?;
        let log_std = self.log_std();
        let std: Vec<f64> = log_std.iter().map(|l| l.exp()).collect();
        let norm: f64 = log_std.iter().sum::<f64>() + HALF_LOG_2PI * log_std.len() as f64;
        let mut logp = Vec::with_capacity(states.rows());
        for r in 0..actions.rows() {
            let mut quad = 0.0;
            for (a, s) in actions.row_mut(r).iter_mut().zip(&std) {
                let eps: f64 = rng.sample(StandardNormal);
                *a += s * eps;
                quad += eps * eps;
            }
            logp.push(-0.5 * quad - norm);
        }
        Ok((actions, logp))
    }

    pub fn sample_action<R: Rng + ?Sized>(&self, state: &[f64], rng: &mut R) -> Result<(Vec<f64>, f64)> {
        let (a, lp) = self.sample_batch(&Matrix::row_vector(state), rng)?;
        Ok((a.into_vec(), lp[0]))
    }

    pub fn log_prob_batch(&self, states: &Matrix, actions: &Matrix) -> Result<Vec<f64>> {
        let mut tape = Tape::for_params(&self.params);
        let s = tape.constant(states.clone());
        let lp = log_prob_tape(&mut tape, &self.spec, s, actions)?;
        Ok(tape.value(lp).as_slice().to_vec())
    }

    pub fn log_prob(&self, state: &[f64], action: &[f64]) -> Result<f64> {
        Ok(self.log_prob_batch(&Matrix::row_vector(state), &Matrix::row_vector(action))?[0])
    }

    /// Differential entropy of the action distribution (state-independent).
    pub fn entropy(&self) -> f64 {
        self.log_std().iter().map(|l| l + 0.5 + HALF_LOG_2PI).sum()
    }
}

/// Log-std row on the tape, bounded to `[LOG_STD_MIN, LOG_STD_MAX]`.
fn log_std_tape(tape: &mut Tape<'_>) -> Result<Var> {
    let raw = tape.param_block(LOG_STD_BLOCK)?;
    Ok(tape.clamp(raw, LOG_STD_MIN, LOG_STD_MAX))
}

/// Mean and (row-repeated) clamped log-std nodes of the policy at `states`.
#[derive(Debug, Clone, Copy)]
pub struct GaussianHeads {
    pub mean: Var,
    pub log_std: Var,
    pub rows: usize,
    pub dim: usize,
}

pub fn gaussian_heads(tape: &mut Tape<'_>, spec: &MlpSpec, states: Var) -> Result<GaussianHeads> {
    let rows = tape.value(states).rows();
    let mean = mlp_tape(tape, spec, states)?;
    let ls = log_std_tape(tape)?;
    let log_std = tape.repeat_rows(ls, rows)?;
    Ok(GaussianHeads {
        mean,
        log_std,
        rows,
        dim: spec.output_dim,
    })
}

/// Per-row log-density `log π(a|s)` as an `n × 1` node.
pub fn log_prob_from_heads(tape: &mut Tape<'_>, heads: GaussianHeads, actions: &Matrix) -> Result<Var> {
    check_dim("action rows", heads.rows, actions.rows())?;
    check_dim("action width", heads.dim, actions.cols())?;
    let ls = heads.log_std;
    let a = tape.constant(actions.clone());
    let diff = tape.sub(a, heads.mean)?;
    let neg_ls = tape.scale(ls, -1.0);
    let inv_std = tape.exp(neg_ls);
    let z = tape.mul(diff, inv_std)?;
    let z2 = tape.square(z);
    let half = tape.scale(z2, -0.5);
    let per_dim = tape.sub(half, ls)?;
    let per_dim = tape.shift(per_dim, -HALF_LOG_2PI);
    Ok(tape.sum_rows(per_dim))
}

/// Mean over rows of `KL(old(·|s) ‖ π(·|s))`, the old policy given by its
/// means at those states and its log-std.
pub fn kl_from_heads(tape: &mut Tape<'_>, heads: GaussianHeads, old_means: &Matrix, old_log_std: &[f64]) -> Result<Var> {
    let (n, d) = (heads.rows, heads.dim);
    check_dim("old mean rows", n, old_means.rows())?;
    check_dim("old log_std", d, old_log_std.len())?;
    let ls = heads.log_std;
    let old_mu = tape.constant(old_means.clone());
    let diff = tape.sub(old_mu, heads.mean)?;
    let diff2 = tape.square(diff);
    let old_var = Matrix::from_vec(
        n,
        d,
        (0..n).flat_map(|_| old_log_std.iter().map(|l| (2.0 * l).exp())).collect(),
    )?;
    let old_var = tape.constant(old_var);
    let num = tape.add(diff2, old_var)?;
    let neg2ls = tape.scale(ls, -2.0);
    let inv_var = tape.exp(neg2ls);
    let quad = tape.mul(num, inv_var)?;
    let quad = tape.scale(quad, 0.5);
    let old_ls_sum: f64 = old_log_std.iter().sum();
    let terms = tape.add(quad, ls)?;
    let per_row = tape.sum_rows(terms);
    let per_row = tape.shift(per_row, -old_ls_sum - 0.5 * d as f64);
    tape.mean(per_row)
}

/// Per-row log-density `log π(a|s)` as an `n × 1` node. Parameters come from
/// the tape, so the result is differentiable in them.
pub fn log_prob_tape(tape: &mut Tape<'_>, spec: &MlpSpec, states: Var, actions: &Matrix) -> Result<Var> {
    let n = tape.value(states).rows();
    check_dim("action rows", n, actions.rows())?;
    check_dim("action width", spec.output_dim, actions.cols())?;
    let heads = gaussian_heads(tape, spec, states)?;
    log_prob_from_heads(tape, heads, actions)
}

/// [`kl_from_heads`] for the policy read from the tape's parameters.
pub fn kl_from_old_tape(
    tape: &mut Tape<'_>,
    spec: &MlpSpec,
    states: Var,
    old_means: &Matrix,
    old_log_std: &[f64],
) -> Result<Var> {
    let n = tape.value(states).rows();
    check_dim("old mean rows", n, old_means.rows())?;
    let heads = gaussian_heads(tape, spec, states)?;
    kl_from_heads(tape, heads, old_means, old_log_std)
}

/// Closed-form KL between two diagonal Gaussians.
pub fn diag_gaussian_kl(mu_p: &[f64], log_std_p: &[f64], mu_q: &[f64], log_std_q: &[f64]) -> f64 {
    mu_p.iter()
        .zip(log_std_p)
        .zip(mu_q.iter().zip(log_std_q))
        .map(|((mp, lp), (mq, lq))| {
            let vp = (2.0 * lp).exp();
            let vq = (2.0 * lq).exp();
            lq - lp + (vp + (mp - mq) * (mp - mq)) / (2.0 * vq) - 0.5
        })
        .sum()
}

/// Per-state `KL(p(·|s) ‖ q(·|s))`.
pub fn kl_per_state(p: &GaussianPolicy, q: &GaussianPolicy, states: &Matrix) -> Result<Vec<f64>> {
    if p.spec != q.spec {
        return Err(Error::Config("policies do not share a network spec".into()));
    }
    let mp = p.mean_batch(states)?;
    let mq = q.mean_batch(states)?;
    let (lp, lq) = (p.log_std(), q.log_std());
    Ok(mp
        .iter_rows()
        .zip(mq.iter_rows())
        .map(|(a, b)| diag_gaussian_kl(a, &lp, b, &lq).max(0.0))
        .collect())
}

/// Mean over `states` of `KL(p(·|s) ‖ q(·|s))`.
pub fn mean_kl(p: &GaussianPolicy, q: &GaussianPolicy, states: &Matrix) -> Result<f64> {
    if states.rows() == 0 {
        return Err(Error::Precondition("mean_kl needs at least one state".into()));
    }
    let kl = kl_per_state(p, q, states)?;
    Ok(kl.iter().sum::<f64>() / kl.len() as f64)
}

/// `−½·d·log(2π)`: log-density at the mean with unit variance.
pub fn unit_gaussian_peak_log_density(d: usize) -> f64 {
    -0.5 * d as f64 * (2.0 * PI).ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn policy(seed: u64) -> GaussianPolicy {
        let spec = GaussianPolicy::default_spec(2, 2, &[8, 8]).unwrap();
        GaussianPolicy::init(spec, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn half_log_two_pi_constant() {
        assert!((HALF_LOG_2PI - 0.5 * (2.0 * PI).ln()).abs() < 1e-16);
    }

    #[test]
    fn log_prob_at_mean_with_unit_std() {
        let p = policy(1);
        let s = [0.4, -1.2];
        let mu = p.mean(&s).unwrap();
        let lp = p.log_prob(&s, &mu).unwrap();
        assert!((lp - unit_gaussian_peak_log_density(2)).abs() < 1e-12);
    }

    #[test]
    fn one_dimensional_closed_form() {
        let spec = MlpSpec::new(1, &[], 1, Activation::Tanh, false).unwrap();
        let params = ParameterVector::zeros(Arc::new(GaussianPolicy::layout(&spec)));
        let p = GaussianPolicy::from_params(spec, params).unwrap();
        let lp = p.log_prob(&[0.3], &[1.0]).unwrap();
        assert!((lp - (-HALF_LOG_2PI - 0.5)).abs() < 1e-12);
        assert!((lp + 1.418_938_533_204_672_7).abs() < 1e-12);
    }

    #[test]
    fn log_prob_is_symmetric_about_the_mean() {
        let p = policy(2);
        let s = [1.0, 0.5];
        let mu = p.mean(&s).unwrap();
        for x in [[0.1, -0.3], [2.0, 1.0]] {
            let plus = [mu[0] + x[0], mu[1] + x[1]];
            let minus = [mu[0] - x[0], mu[1] - x[1]];
            let a = p.log_prob(&s, &plus).unwrap();
            let b = p.log_prob(&s, &minus).unwrap();
            assert!((a - b).abs() < 1e-12);
            assert!(a < p.log_prob(&s, &mu).unwrap());
        }
    }

    #[test]
    fn degenerate_std_returns_mean() {
        let p = policy(3);
        let params = p.params().map_block(LOG_STD_BLOCK, |_| -25.0).unwrap();
        let p = p.with_params(params).unwrap();
        assert_eq!(p.log_std(), vec![-20.0, -20.0]);
        let s = [0.7, 0.2];
        let mu = p.mean(&s).unwrap();
        let (a, _) = p.sample_action(&s, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        for (x, m) in a.iter().zip(&mu) {
            assert!((x - m).abs() < 1e-7);
        }
    }

    #[test]
    fn sampled_log_prob_matches_density() {
        let p = policy(4);
        let params = p.params().map_block(LOG_STD_BLOCK, |_| -0.7).unwrap();
        let p = p.with_params(params).unwrap();
        let states = Matrix::from_rows(&[[0.1, 0.2], [-1.0, 1.5], [2.0, -2.0]]).unwrap();
        let (a, lp) = p.sample_batch(&states, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let lp2 = p.log_prob_batch(&states, &a).unwrap();
        for (x, y) in lp.iter().zip(&lp2) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn sampling_is_deterministic_for_a_seed() {
        let p = policy(5);
        let s = [0.3, 0.3];
        let a = p.sample_action(&s, &mut ChaCha8Rng::seed_from_u64(77)).unwrap();
        let b = p.sample_action(&s, &mut ChaCha8Rng::seed_from_u64(77)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn kl_identities() {
        let p = policy(6);
        let states = Matrix::from_rows(&[[0.1, 0.2], [-1.0, 1.5]]).unwrap();
        assert_eq!(mean_kl(&p, &p, &states).unwrap(), 0.0);
        assert!((diag_gaussian_kl(&[0.0], &[0.0], &[1.0], &[0.0]) - 0.5).abs() < 1e-15);
        let q = policy(7);
        assert!(mean_kl(&p, &q, &states).unwrap() > 0.0);
        assert!(mean_kl(&p, &q, &Matrix::zeros(0, 2)).is_err());
    }

    #[test]
    fn kl_tape_matches_closed_form() {
        let p = policy(8);
        let q = policy(9);
        let q = q.with_params(q.params().map_block(LOG_STD_BLOCK, |_| -0.4).unwrap()).unwrap();
        let states = Matrix::from_rows(&[[0.1, 0.2], [-1.0, 1.5], [0.0, 0.0]]).unwrap();
        let old_means = p.mean_batch(&states).unwrap();
        let via_tape = crate::diffcore::value(q.params(), |t| {
            let s = t.constant(states.clone());
            kl_from_old_tape(t, q.spec(), s, &old_means, &p.log_std())
        })
        .unwrap();
        let closed = mean_kl(&p, &q, &states).unwrap();
        assert!((via_tape - closed).abs() < 1e-12);
    }
}
