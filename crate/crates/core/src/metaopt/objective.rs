use serde::{Deserialize, Serialize};

use super::trpo::TrustRegionProblem;
use crate::diffcore::{grad, hvp_fd_scaled, value, Matrix, MlpSpec, ParameterVector, Tape, Var};
use crate::error::{check_dim, Error, Result};
use crate::policy::{gaussian_heads, kl_from_heads, kl_from_old_tape, log_prob_from_heads, log_prob_tape, GaussianPolicy};

/// Stacked pre-update data `𝒯_k` for one inner step.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptationData {
    pub states: Matrix,
    pub actions: Matrix,
    pub advantages: Vec<f64>,
}

impl AdaptationData {
    pub fn new(states: Matrix, actions: Matrix, advantages: Vec<f64>) -> Result<Self> {
        if states.rows() == 0 {
            return Err(Error::Precondition("adaptation batch is empty".into()));
        }
        check_dim("adaptation actions", states.rows(), actions.rows())?;
        check_dim("adaptation advantages", states.rows(), advantages.len())?;
        Ok(Self {
            states,
            actions,
            advantages,
        })
    }
}

/// Stacked post-update data `𝒯'_k`, with the sampling-time policy's
/// log-densities, means and log-std.
#[derive(Debug, Clone, PartialEq)]
pub struct PostUpdateData {
    pub states: Matrix,
    pub actions: Matrix,
    pub old_log_probs: Vec<f64>,
    pub advantages: Vec<f64>,
    pub old_means: Matrix,
    pub old_log_std: Vec<f64>,
}

impl PostUpdateData {
    pub fn new(
        sampling_policy: &GaussianPolicy,
        states: Matrix,
        actions: Matrix,
        old_log_probs: Vec<f64>,
        advantages: Vec<f64>,
    ) -> Result<Self> {
        if states.rows() == 0 {
            return Err(Error::Precondition("post-update batch is empty".into()));
        }
        check_dim("post-update actions", states.rows(), actions.rows())?;
        check_dim("post-update log-probs", states.rows(), old_log_probs.len())?;
        check_dim("post-update advantages", states.rows(), advantages.len())?;
        let old_means = sampling_policy.mean_batch(&states)?;
        Ok(Self {
            states,
            actions,
            old_log_probs,
            advantages,
            old_means,
            old_log_std: sampling_policy.log_std(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelTask {
    pub pre: AdaptationData,
    pub post: PostUpdateData,
}

fn mean_weighted(tape: &mut Tape<'_>, per_row: Var, weights: &[f64]) -> Result<Var> {
    let w = tape.constant(Matrix::column(weights));
    let prod = tape.mul(per_row, w)?;
    tape.mean(prod)
}

fn inner_tape(tape: &mut Tape<'_>, spec: &MlpSpec, pre: &AdaptationData) -> Result<Var> {
    let s = tape.constant(pre.states.clone());
    let lp = log_prob_tape(tape, spec, s, &pre.actions)?;
    mean_weighted(tape, lp, &pre.advantages)
}

fn surrogate_tape(tape: &mut Tape<'_>, spec: &MlpSpec, post: &PostUpdateData) -> Result<Var> {
    let s = tape.constant(post.states.clone());
    let lp = log_prob_tape(tape, spec, s, &post.actions)?;
    let old = tape.constant(Matrix::column(&post.old_log_probs));
    let diff = tape.sub(lp, old)?;
    let ratio = tape.exp(diff);
    mean_weighted(tape, ratio, &post.advantages)
}

/// Surrogate and KL of the policy at `adapted`, sharing one forward pass.
fn surrogate_and_kl(spec: &MlpSpec, adapted: &ParameterVector, post: &PostUpdateData) -> Result<(f64, f64)> {
    let mut tape = Tape::for_params(adapted);
    let s = tape.constant(post.states.clone());
    let heads = gaussian_heads(&mut tape, spec, s)?;
    let lp = log_prob_from_heads(&mut tape, heads, &post.actions)?;
    let old = tape.constant(Matrix::column(&post.old_log_probs));
    let diff = tape.sub(lp, old)?;
    let ratio = tape.exp(diff);
    let surr = mean_weighted(&mut tape, ratio, &post.advantages)?;
    let kl = kl_from_heads(&mut tape, heads, &post.old_means, &post.old_log_std)?;
    Ok((tape.scalar(surr)?, tape.scalar(kl)?))
}

fn kl_tape(tape: &mut Tape<'_>, spec: &MlpSpec, post: &PostUpdateData) -> Result<Var> {
    let s = tape.constant(post.states.clone());
    kl_from_old_tape(tape, spec, s, &post.old_means, &post.old_log_std)
}

/// Inner objective `J_k(θ) = mean(log π_θ(a|s) · Â)` over `𝒯_k`.
pub fn inner_objective(spec: &MlpSpec, theta: &ParameterVector, pre: &AdaptationData) -> Result<f64> {
    value(theta, |t| inner_tape(t, spec, pre))
}

/// Likelihood-ratio gradient `∇_θ J_k(θ)`.
pub fn inner_gradient(spec: &MlpSpec, theta: &ParameterVector, pre: &AdaptationData) -> Result<ParameterVector> {
    Ok(grad(theta, |t| inner_tape(t, spec, pre))?.1)
}

/// One vanilla policy-gradient step `θ + α∇J_k(θ)`.
pub fn inner_adapt(spec: &MlpSpec, theta: &ParameterVector, pre: &AdaptationData, alpha: f64) -> Result<ParameterVector> {
    if alpha == 0.0 {
        return Ok(theta.clone());
    }
    theta.axpy(alpha, &inner_gradient(spec, theta, pre)?)
}

/// Importance-weighted surrogate of model `k` as a function of the pre-update
/// parameters: the inner step is recomputed from `theta`.
pub fn surrogate_k(spec: &MlpSpec, theta: &ParameterVector, alpha: f64, task: &ModelTask) -> Result<f64> {
    let adapted = inner_adapt(spec, theta, &task.pre, alpha)?;
    value(&adapted, |t| surrogate_tape(t, spec, &task.post))
}

/// Gradient of the importance-weighted surrogate at the adapted parameters,
/// holding the adaptation fixed.
pub fn surrogate_gradient(spec: &MlpSpec, adapted: &ParameterVector, post: &PostUpdateData) -> Result<ParameterVector> {
    Ok(grad(adapted, |t| surrogate_tape(t, spec, post))?.1)
}

fn require_tasks(tasks: &[ModelTask]) -> Result<()> {
    if tasks.is_empty() {
        return Err(Error::Precondition("the meta-objective needs at least one model".into()));
    }
    Ok(())
}

/// `(1/K) Σ_k surrogate_k(θ)`.
pub fn meta_surrogate(spec: &MlpSpec, theta: &ParameterVector, alpha: f64, tasks: &[ModelTask]) -> Result<f64> {
    require_tasks(tasks)?;
    let mut total = 0.0;
    for (k, task) in tasks.iter().enumerate() {
        total += surrogate_k(spec, theta, alpha, task).map_err(|e| e.in_model(k))?;
    }
    Ok(total / tasks.len() as f64)
}

/// Gradient of [`meta_surrogate`]. Per model, the outer gradient `g` at
/// `θ'_k` is pulled back through `dθ'_k/dθ = I + α∇²J_k(θ)`; the curvature
/// product is a finite difference of the inner gradient along `g`.
pub fn meta_gradient(spec: &MlpSpec, theta: &ParameterVector, alpha: f64, tasks: &[ModelTask]) -> Result<ParameterVector> {
    meta_gradient_impl(spec, theta, alpha, tasks, None)
}

/// [`meta_gradient`] reusing the adapted parameters already held in `state`.
pub fn meta_gradient_from_state(spec: &MlpSpec, state: &MetaPolicyState, tasks: &[ModelTask]) -> Result<ParameterVector> {
    check_dim("adapted parameter sets", tasks.len(), state.adapted.len())?;
    meta_gradient_impl(spec, &state.theta, state.alpha, tasks, Some(&state.adapted))
}

fn meta_gradient_impl(
    spec: &MlpSpec,
    theta: &ParameterVector,
    alpha: f64,
    tasks: &[ModelTask],
    adapted: Option<&[ParameterVector]>,
) -> Result<ParameterVector> {
    require_tasks(tasks)?;
    let mut acc = vec![0.0; theta.len()];
    for (k, task) in tasks.iter().enumerate() {
        let g = pulled_back(spec, theta, alpha, &task.pre, adapted.map(|a| &a[k]), |t| {
            surrogate_tape(t, spec, &task.post)
        })
        .map_err(|e| e.in_model(k))?;
        for (a, v) in acc.iter_mut().zip(g.values()) {
            *a += v;
        }
    }
    let inv_k = 1.0 / tasks.len() as f64;
    let out = theta.with_values(acc.into_iter().map(|v| v * inv_k).collect())?;
    if !out.is_finite() {
        return Err(Error::Numeric("non-finite meta-gradient".into()));
    }
    Ok(out)
}

/// `(I + α∇²J_k(θ)) ∇_{θ'} f(θ'_k(θ))` for an objective `f` of the adapted parameters.
fn pulled_back<F>(
    spec: &MlpSpec,
    theta: &ParameterVector,
    alpha: f64,
    pre: &AdaptationData,
    adapted: Option<&ParameterVector>,
    outer: F,
) -> Result<ParameterVector>
where
    F: FnOnce(&mut Tape<'_>) -> Result<Var>,
{
    let adapted = match adapted {
        Some(a) => a.clone(),
        None => inner_adapt(spec, theta, pre, alpha)?,
    };
    let (_, g) = grad(&adapted, outer)?;
    if alpha == 0.0 {
        return Ok(g);
    }
    let hg = hvp_fd_scaled(|p| inner_gradient(spec, p, pre), theta, &g)?;
    g.axpy(alpha, &hg)
}

/// How the outer step's Fisher-vector products treat the inner step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FisherMode {
    /// Differentiate the KL through `θ'_k(θ̃) = θ̃ + α∇J_k(θ̃)`.
    Exact,
    /// Hold the inner gradient at its sampling-time value, so `θ'_k` moves
    /// one-for-one with `θ̃`.
    FirstOrder,
}

/// The meta-objective as a trust-region problem around the sampling-time
/// parameters. Surrogate and KL are always measured exactly; only the
/// curvature model used for the search direction may be approximated.
#[derive(Debug, Clone)]
pub struct MetaObjective<'a> {
    spec: &'a MlpSpec,
    alpha: f64,
    tasks: &'a [ModelTask],
    mode: FisherMode,
    fisher_posts: Vec<PostUpdateData>,
    shifts: Vec<ParameterVector>,
}

impl<'a> MetaObjective<'a> {
    /// `stride` keeps every `stride`-th post-update state for curvature products.
    pub fn new(
        spec: &'a MlpSpec,
        alpha: f64,
        tasks: &'a [ModelTask],
        theta: &ParameterVector,
        mode: FisherMode,
        stride: usize,
    ) -> Result<Self> {
        require_tasks(tasks)?;
        if stride == 0 {
            return Err(Error::Config("fisher stride must be positive".into()));
        }
        let fisher_posts = tasks.iter().map(|t| subsample(&t.post, stride)).collect();
        let shifts = match mode {
            FisherMode::Exact => Vec::new(),
            FisherMode::FirstOrder => tasks
                .iter()
                .enumerate()
                .map(|(k, t)| {
                    inner_gradient(spec, theta, &t.pre)
                        .map(|g| g.scale(alpha))
                        .map_err(|e| e.in_model(k))
                })
                .collect::<Result<_>>()?,
        };
        Ok(Self {
            spec,
            alpha,
            tasks,
            mode,
            fisher_posts,
            shifts,
        })
    }

    /// Like [`MetaObjective::new`], taking `θ`, `α` and the inner gradients from `state`.
    pub fn from_state(
        spec: &'a MlpSpec,
        tasks: &'a [ModelTask],
        state: &MetaPolicyState,
        mode: FisherMode,
        stride: usize,
    ) -> Result<Self> {
        require_tasks(tasks)?;
        check_dim("inner gradients", tasks.len(), state.inner_gradients.len())?;
        if stride == 0 {
            return Err(Error::Config("fisher stride must be positive".into()));
        }
        let shifts = match mode {
            FisherMode::Exact => Vec::new(),
            FisherMode::FirstOrder => state.inner_gradients.iter().map(|g| g.scale(state.alpha)).collect(),
        };
        Ok(Self {
            spec,
            alpha: state.alpha,
            tasks,
            mode,
            fisher_posts: tasks.iter().map(|t| subsample(&t.post, stride)).collect(),
            shifts,
        })
    }
}

fn subsample(post: &PostUpdateData, stride: usize) -> PostUpdateData {
    if stride == 1 {
        return post.clone();
    }
    let rows: Vec<usize> = (0..post.states.rows()).step_by(stride).collect();
    PostUpdateData {
        states: post.states.select_rows(&rows),
        actions: post.actions.select_rows(&rows),
        old_log_probs: rows.iter().map(|&r| post.old_log_probs[r]).collect(),
        advantages: rows.iter().map(|&r| post.advantages[r]).collect(),
        old_means: post.old_means.select_rows(&rows),
        old_log_std: post.old_log_std.clone(),
    }
}

impl TrustRegionProblem for MetaObjective<'_> {
    fn evaluate(&self, theta: &ParameterVector) -> Result<(f64, f64)> {
        let (mut surr, mut kl) = (0.0, 0.0);
        for (k, task) in self.tasks.iter().enumerate() {
            let adapted = inner_adapt(self.spec, theta, &task.pre, self.alpha).map_err(|e| e.in_model(k))?;
            let (sk, kk) = surrogate_and_kl(self.spec, &adapted, &task.post).map_err(|e| e.in_model(k))?;
            surr += sk;
            kl += kk;
        }
        let n = self.tasks.len() as f64;
        Ok((surr / n, kl / n))
    }

    fn kl_grad(&self, theta: &ParameterVector) -> Result<ParameterVector> {
        let mut acc = vec![0.0; theta.len()];
        for (k, (task, post)) in self.tasks.iter().zip(&self.fisher_posts).enumerate() {
            let outer = |t: &mut Tape<'_>| kl_tape(t, self.spec, post);
            let g = match self.mode {
                FisherMode::Exact => pulled_back(self.spec, theta, self.alpha, &task.pre, None, outer),
                FisherMode::FirstOrder => theta
                    .axpy(1.0, &self.shifts[k])
                    .and_then(|adapted| grad(&adapted, outer).map(|(_, g)| g)),
            }
            .map_err(|e| e.in_model(k))?;
            for (a, v) in acc.iter_mut().zip(g.values()) {
                *a += v;
            }
        }
        let inv_k = 1.0 / self.tasks.len() as f64;
        theta.with_values(acc.into_iter().map(|v| v * inv_k).collect())
    }
}

/// Pre-update parameters and the adapted parameters they induce per model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaPolicyState {
    pub theta: ParameterVector,
    pub adapted: Vec<ParameterVector>,
    pub inner_gradients: Vec<ParameterVector>,
    pub alpha: f64,
}

impl MetaPolicyState {
    /// A state with no adaptation yet: every `θ'_k` equals `θ`.
    pub fn unadapted(theta: ParameterVector, k: usize, alpha: f64) -> Result<Self> {
        if !(alpha >= 0.0 && alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be a finite non-negative number, got {alpha}")));
        }
        let zero = theta.scale(0.0);
        Ok(Self {
            adapted: vec![theta.clone(); k],
            inner_gradients: vec![zero; k],
            theta,
            alpha,
        })
    }

    /// Runs the inner step on every model's pre-update data.
    pub fn adapt(spec: &MlpSpec, theta: ParameterVector, alpha: f64, pre: &[AdaptationData]) -> Result<Self> {
        let mut state = Self::unadapted(theta, 0, alpha)?;
        for (k, data) in pre.iter().enumerate() {
            let g = inner_gradient(spec, &state.theta, data).map_err(|e| e.in_model(k))?;
            let adapted = if alpha == 0.0 {
                state.theta.clone()
            } else {
                state.theta.axpy(alpha, &g)?
            };
            state.inner_gradients.push(g);
            state.adapted.push(adapted);
        }
        Ok(state)
    }

    /// Checks `θ'_k == θ + α·g_k` for every stored gradient.
    pub fn is_consistent(&self) -> bool {
        self.adapted.len() == self.inner_gradients.len()
            && self.adapted.iter().zip(&self.inner_gradients).all(|(a, g)| {
                let expected = if self.alpha == 0.0 {
                    Ok(self.theta.clone())
                } else {
                    self.theta.axpy(self.alpha, g)
                };
                expected.map(|e| &e == a).unwrap_or(false)
            })
    }
}
