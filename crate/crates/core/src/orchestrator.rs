//! The full training loop: real data collection, ensemble retraining, and
//! repeated meta-updates on imaginary rollouts.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dynamics::{train_ensemble, DynamicsTrainConfig, ModelEnsemble, Perturbation, TransitionBuffer};
use crate::envs::{EnvKind, RealEnv};
use crate::error::{Error, Result};
use crate::metaopt::{
    meta_gradient_from_state, trpo_step, AdaptationData, FisherMode, MetaObjective, MetaPolicyState, ModelTask, PostUpdateData,
    TrpoConfig,
};
use crate::policy::{mean_kl, GaussianPolicy, LOG_STD_BLOCK};
use crate::rng::{stream, tag};
use crate::sampling::{csv_error, gae, rollout_model, rollout_real, standardize, Controller, LinearBaseline, TrajectoryBatch};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbationConfig {
    pub b_max: f64,
    #[serde(default = "default_noise_std")]
    pub noise_std: f64,
}

fn default_noise_std() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub env: EnvKind,
    pub ensemble_size: usize,
    pub alpha: f64,
    pub trpo: TrpoConfig,
    pub meta_steps_per_iter: usize,
    /// Real transitions collected per iteration; a multiple of the horizon.
    pub real_transitions_per_iter: usize,
    /// Imaginary transitions per meta-step, split evenly over the models and
    /// over their pre- and post-update batches.
    pub imaginary_transitions: usize,
    pub n_iterations: usize,
    pub seed: u64,
    pub tailored_collection: bool,
    pub perturbation: Option<PerturbationConfig>,
    pub eval_episodes: usize,
    pub policy_hidden: Vec<usize>,
    pub model_hidden: Vec<usize>,
    pub init_log_std: f64,
    pub dynamics: DynamicsTrainConfig,
    pub discount: f64,
    pub gae_lambda: f64,
    pub standardize_advantages: bool,
    pub standardize_inner_advantages: bool,
    /// Draw fresh imaginary batches for every meta-step instead of reusing
    /// the first batch of the iteration.
    pub resample_each_meta_step: bool,
    pub fisher: FisherMode,
    pub fisher_stride: usize,
    pub checkpoint_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            env: EnvKind::Point2d,
            ensemble_size: 5,
            alpha: 1e-3,
            trpo: TrpoConfig::default(),
            meta_steps_per_iter: 30,
            real_transitions_per_iter: 600,
            imaginary_transitions: 6000,
            n_iterations: 50,
            seed: 0,
            tailored_collection: true,
            perturbation: None,
            eval_episodes: 10,
            policy_hidden: vec![32, 32],
            model_hidden: vec![64, 64],
            init_log_std: 0.0,
            dynamics: DynamicsTrainConfig::default(),
            discount: 0.99,
            gae_lambda: 1.0,
            standardize_advantages: true,
            standardize_inner_advantages: true,
            resample_each_meta_step: true,
            fisher: FisherMode::FirstOrder,
            fisher_stride: 5,
            checkpoint_every: 10,
        }
    }
}

impl RunConfig {
    /// Defaults scaled to the horizon of `env`.
    pub fn for_env(env: EnvKind) -> Self {
        let h = env.spec().horizon;
        Self {
            env,
            real_transitions_per_iter: 20 * h,
            imaginary_transitions: 200 * h,
            ..Self::default()
        }
    }

    pub fn horizon(&self) -> usize {
        self.env.spec().horizon
    }

    /// Imaginary transitions per model per batch, rounded down to whole
    /// episodes (at least one).
    pub fn per_model_transitions(&self) -> usize {
        let h = self.horizon();
        ((self.imaginary_transitions / (2 * self.ensemble_size.max(1))) / h).max(1) * h
    }

    pub fn validate(&self) -> Result<()> {
        let h = self.horizon();
        let positive = [
            ("ensemble_size", self.ensemble_size),
            ("meta_steps_per_iter", self.meta_steps_per_iter),
            ("real_transitions_per_iter", self.real_transitions_per_iter),
            ("imaginary_transitions", self.imaginary_transitions),
            ("n_iterations", self.n_iterations),
            ("eval_episodes", self.eval_episodes),
            ("fisher_stride", self.fisher_stride),
            ("checkpoint_every", self.checkpoint_every),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.real_transitions_per_iter % h != 0 {
            return Err(Error::Config(format!(
                "real_transitions_per_iter ({}) must be a multiple of the horizon {h}",
                self.real_transitions_per_iter
            )));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config("alpha must be finite and non-negative".into()));
        }
        if !(self.discount > 0.0 && self.discount <= 1.0) || !(0.0..=1.0).contains(&self.gae_lambda) {
            return Err(Error::Config("discount must lie in (0, 1] and gae_lambda in [0, 1]".into()));
        }
        if self.policy_hidden.contains(&0) || self.model_hidden.contains(&0) {
            return Err(Error::Config("hidden layer sizes must be positive".into()));
        }
        if let Some(p) = &self.perturbation {
            if !(p.b_max >= 0.0 && p.noise_std >= 0.0) {
                return Err(Error::Config("perturbation b_max and noise_std must be non-negative".into()));
            }
        }
        self.trpo.validate()?;
        self.dynamics.validate()
    }
}

/// One outer step of the meta-update loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaStepRecord {
    pub accepted: bool,
    pub kl: f64,
    pub surrogate_before: f64,
    pub surrogate_after: f64,
    pub backtracks: usize,
    /// `θ` after the step equals `θ` before it, bit for bit.
    pub theta_unchanged: bool,
    pub truncated_rollouts: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Real transitions collected for training so far (evaluation excluded).
    pub real_env_samples_total: u64,
    pub avg_return: f64,
    pub std_return: f64,
    pub model_val_losses: Vec<f64>,
    pub model_epochs: Vec<usize>,
    pub models_stopped_early: usize,
    /// Per model, `KL(π_θ ‖ π_θ'_k)` on post-update states, averaged over meta-steps.
    pub inner_kl: Vec<f64>,
    pub meta_steps: Vec<MetaStepRecord>,
    pub buffer_size: usize,
}

impl IterationRecord {
    pub fn mean_model_val_loss(&self) -> f64 {
        mean(&self.model_val_losses)
    }

    pub fn mean_inner_kl(&self) -> f64 {
        mean(&self.inner_kl)
    }

    pub fn trpo_accepted(&self) -> usize {
        self.meta_steps.iter().filter(|m| m.accepted).count()
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

#[derive(Debug, Clone, Serialize)]
struct ProgressRow {
    iteration: usize,
    real_env_samples_total: u64,
    avg_return: f64,
    std_return: f64,
    mean_model_val_loss: f64,
    mean_inner_kl: f64,
    trpo_accepted: usize,
}

impl From<&IterationRecord> for ProgressRow {
    fn from(r: &IterationRecord) -> Self {
        Self {
            iteration: r.iteration,
            real_env_samples_total: r.real_env_samples_total,
            avg_return: r.avg_return,
            std_return: r.std_return,
            mean_model_val_loss: r.mean_model_val_loss(),
            mean_inner_kl: r.mean_inner_kl(),
            trpo_accepted: r.trpo_accepted(),
        }
    }
}

/// Writes `progress.csv` with one row per record.
pub fn write_progress(path: &Path, records: &[IterationRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
    for r in records {
        w.serialize(ProgressRow::from(r)).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

/// Everything needed to resume analysis of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    /// Iterations completed.
    pub iteration: usize,
    pub config: RunConfig,
    pub policy: GaussianPolicy,
    pub meta_state: MetaPolicyState,
    pub ensemble: ModelEnsemble,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    pub fn file_name(iteration: usize) -> String {
        format!("checkpoint_{iteration:04}.json")
    }
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub records: Vec<IterationRecord>,
    /// The final pre-update policy `θ*`.
    pub policy: GaussianPolicy,
    pub meta_state: MetaPolicyState,
    pub ensemble: ModelEnsemble,
    /// Every real transition executed, evaluation included.
    pub real_env_transitions: u64,
    pub eval_transitions: u64,
}

impl RunResult {
    pub fn checkpoint(&self, config: &RunConfig) -> Checkpoint {
        Checkpoint {
            iteration: self.records.len(),
            config: config.clone(),
            policy: self.policy.clone(),
            meta_state: self.meta_state.clone(),
            ensemble: self.ensemble.clone(),
        }
    }

    pub fn final_return(&self) -> f64 {
        self.records.last().map_or(f64::NAN, |r| r.avg_return)
    }
}

/// Monte-Carlo return of the stochastic policy on the real environment:
/// `(mean, population std)` over `n_episodes`.
pub fn evaluate<R: rand::Rng + ?Sized>(
    policy: &GaussianPolicy,
    env: &mut RealEnv,
    n_episodes: usize,
    rng: &mut R,
) -> Result<(f64, f64)> {
    if n_episodes == 0 {
        return Err(Error::Precondition("evaluation needs at least one episode".into()));
    }
    let h = env.spec().horizon;
    let batch = rollout_real(env, &[Controller::Policy(policy)], n_episodes * h, h, rng)?;
    let returns: Vec<f64> = batch.trajectories.iter().map(|t| t.total_reward()).collect();
    let m = mean(&returns);
    let var = returns.iter().map(|r| (r - m) * (r - m)).sum::<f64>() / returns.len() as f64;
    Ok((m, var.sqrt()))
}

fn advantages(batch: &TrajectoryBatch, cfg: &RunConfig, standardized: bool) -> Result<Vec<f64>> {
    let baseline = LinearBaseline::fit(batch, cfg.discount, cfg.horizon())?;
    let mut adv = gae(batch, &baseline, cfg.discount, cfg.gae_lambda)?;
    if standardized {
        standardize(&mut adv);
    }
    Ok(adv)
}

fn empty_batch(k: usize) -> Error {
    Error::Numeric("every imaginary rollout diverged".into()).in_model(k)
}

fn pre_update_data(cfg: &RunConfig, batch: &TrajectoryBatch, k: usize) -> Result<AdaptationData> {
    if batch.n_transitions() == 0 {
        return Err(empty_batch(k));
    }
    let adv = advantages(batch, cfg, cfg.standardize_inner_advantages)?;
    let s = batch.stacked();
    AdaptationData::new(s.states, s.actions, adv)
}

fn post_update_data(cfg: &RunConfig, batch: &TrajectoryBatch, k: usize, sampling: &GaussianPolicy) -> Result<PostUpdateData> {
    if batch.n_transitions() == 0 {
        return Err(empty_batch(k));
    }
    let adv = advantages(batch, cfg, cfg.standardize_advantages)?;
    let s = batch.stacked();
    PostUpdateData::new(sampling, s.states, s.actions, s.log_probs, adv)
}

/// Runs the whole algorithm. With `out_dir`, `progress.csv` is rewritten
/// after every iteration and checkpoints are stored every
/// `checkpoint_every` iterations and at the end. `on_iteration` sees each
/// record as it is produced.
pub fn run(
    cfg: &RunConfig,
    out_dir: Option<&Path>,
    on_iteration: &mut dyn FnMut(&IterationRecord),
) -> Result<RunResult> {
    cfg.validate()?;
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir.join("checkpoints"))?;
    }
    let spec = cfg.env.spec();
    let (sd, ad, h) = (spec.state_dim, spec.action_dim, spec.horizon);
    let policy_spec = GaussianPolicy::default_spec(sd, ad, &cfg.policy_hidden)?;
    let mut policy = GaussianPolicy::init(policy_spec, &mut stream(cfg.seed, &[tag::POLICY_INIT]))?;
    policy = policy.with_params(policy.params().map_block(LOG_STD_BLOCK, |_| cfg.init_log_std)?)?;
    let mut ensemble = ModelEnsemble::init(cfg.ensemble_size, sd, ad, &cfg.model_hidden, derive(cfg, tag::MODEL_INIT))?;
    if let Some(p) = &cfg.perturbation {
        ensemble.set_perturbation(Some(Perturbation::new(p.b_max, p.noise_std, cfg.ensemble_size)?))?;
    }
    let mut meta_state = MetaPolicyState::unadapted(policy.params().clone(), cfg.ensemble_size, cfg.alpha)?;
    let mut env = RealEnv::new(cfg.env);
    let mut buffer = TransitionBuffer::new(sd, ad);
    let mut records = Vec::with_capacity(cfg.n_iterations);
    let mut collected = 0u64;
    let mut eval_transitions = 0u64;
    let n_imag = cfg.per_model_transitions();

    for it in 0..cfg.n_iterations {
        let record = (|| -> Result<IterationRecord> {
            // data collection
            let adapted_policies = meta_state
                .adapted
                .iter()
                .map(|p| policy.with_params(p.clone()))
                .collect::<Result<Vec<_>>>()?;
            let controllers: Vec<Controller<'_>> = if it == 0 {
                vec![Controller::UniformRandom]
            } else if cfg.tailored_collection {
                adapted_policies.iter().map(Controller::Policy).collect()
            } else {
                vec![Controller::Policy(&policy)]
            };
            let mut rng = stream(cfg.seed, &[tag::REAL_ROLLOUT, it as u64]);
            let batch = rollout_real(&mut env, &controllers, cfg.real_transitions_per_iter, h, &mut rng)?;
            for traj in &batch.trajectories {
                for t in 0..traj.len() {
                    buffer.push(traj.states.row(t), &cfg.env.clip_action(traj.actions.row(t)), traj.states.row(t + 1))?;
                }
            }
            collected += batch.n_transitions() as u64;

            // models
            let report = train_ensemble(&mut ensemble, &buffer, &cfg.dynamics, crate::rng::derive_seed(cfg.seed, &[tag::MODEL_TRAIN, it as u64]))?;
            if ensemble.perturbation().is_some() {
                ensemble.resample_perturbation(&mut stream(cfg.seed, &[tag::PERTURBATION, it as u64]))?;
            }

            // meta-optimization on imaginary data only
            let mut meta_steps = Vec::with_capacity(cfg.meta_steps_per_iter);
            let mut inner_kl = vec![0.0; cfg.ensemble_size];
            let mut reuse: Option<(Vec<AdaptationData>, Vec<PostUpdateData>)> = None;
            for step in 0..cfg.meta_steps_per_iter {
                let theta = policy.params().clone();
                let mut truncated_rollouts = 0;
                let (pre, post) = match reuse.take() {
                    Some((pre, post)) => {
                        meta_state = MetaPolicyState::adapt(policy.spec(), theta.clone(), cfg.alpha, &pre)?;
                        (pre, post)
                    }
                    None => {
                        let mut pre = Vec::with_capacity(cfg.ensemble_size);
                        for k in 0..cfg.ensemble_size {
                            let mut rng = stream(cfg.seed, &[tag::PRE_ROLLOUT, it as u64, step as u64, k as u64]);
                            let batch = rollout_model(&ensemble.member(k), k, &policy, cfg.env, n_imag, h, &mut rng)
                                .map_err(|e| e.in_model(k))?;
                            truncated_rollouts += batch.n_truncated();
                            pre.push(pre_update_data(cfg, &batch, k)?);
                        }
                        meta_state = MetaPolicyState::adapt(policy.spec(), theta.clone(), cfg.alpha, &pre)?;
                        let mut post = Vec::with_capacity(cfg.ensemble_size);
                        for k in 0..cfg.ensemble_size {
                            let adapted = policy.with_params(meta_state.adapted[k].clone())?;
                            let mut rng = stream(cfg.seed, &[tag::POST_ROLLOUT, it as u64, step as u64, k as u64]);
                            let batch = rollout_model(&ensemble.member(k), k, &adapted, cfg.env, n_imag, h, &mut rng)
                                .map_err(|e| e.in_model(k))?;
                            truncated_rollouts += batch.n_truncated();
                            post.push(post_update_data(cfg, &batch, k, &adapted)?);
                        }
                        (pre, post)
                    }
                };
                for (k, p) in post.iter().enumerate() {
                    let adapted = policy.with_params(meta_state.adapted[k].clone())?;
                    inner_kl[k] += mean_kl(&policy, &adapted, &p.states)? / cfg.meta_steps_per_iter as f64;
                }
                let tasks: Vec<ModelTask> = pre
                    .iter()
                    .cloned()
                    .zip(post.iter().cloned())
                    .map(|(pre, post)| ModelTask { pre, post })
                    .collect();
                if !cfg.resample_each_meta_step {
                    reuse = Some((pre, post));
                }
                let grad = meta_gradient_from_state(policy.spec(), &meta_state, &tasks)?;
                let problem = MetaObjective::from_state(policy.spec(), &tasks, &meta_state, cfg.fisher, cfg.fisher_stride)?;
                let out = trpo_step(&theta, &grad, &problem, &cfg.trpo)?;
                meta_steps.push(MetaStepRecord {
                    accepted: out.accepted,
                    kl: out.kl,
                    surrogate_before: out.surrogate_before,
                    surrogate_after: out.surrogate_after,
                    backtracks: out.backtracks,
                    theta_unchanged: out.theta == theta,
                    truncated_rollouts,
                });
                policy = policy.with_params(out.theta)?;
            }

            // evaluation of the pre-update policy
            let before = env.transitions();
            let (avg_return, std_return) =
                evaluate(&policy, &mut env, cfg.eval_episodes, &mut stream(cfg.seed, &[tag::EVAL, it as u64]))?;
            eval_transitions += env.transitions() - before;

            Ok(IterationRecord {
                iteration: it,
                real_env_samples_total: collected,
                avg_return,
                std_return,
                model_val_losses: report.models.iter().map(|m| m.final_val_loss).collect(),
                model_epochs: report.models.iter().map(|m| m.epochs).collect(),
                models_stopped_early: report.models.iter().filter(|m| m.stopped_early).count(),
                inner_kl,
                meta_steps,
                buffer_size: buffer.len(),
            })
        })()
        .map_err(|e| e.in_iteration(it))?;
        on_iteration(&record);
        records.push(record);
        if let Some(dir) = out_dir {
            write_progress(&dir.join("progress.csv"), &records)?;
            let done = it + 1;
            if done % cfg.checkpoint_every == 0 || done == cfg.n_iterations {
                let ckpt = Checkpoint {
                    iteration: done,
                    config: cfg.clone(),
                    policy: policy.clone(),
                    meta_state: meta_state.clone(),
                    ensemble: ensemble.clone(),
                };
                ckpt.save(&checkpoint_path(dir, done))?;
            }
        }
    }
    Ok(RunResult {
        records,
        policy,
        meta_state,
        ensemble,
        real_env_transitions: env.transitions(),
        eval_transitions,
    })
}

pub fn checkpoint_path(dir: &Path, iteration: usize) -> PathBuf {
    dir.join("checkpoints").join(Checkpoint::file_name(iteration))
}

fn derive(cfg: &RunConfig, purpose: u64) -> u64 {
    crate::rng::derive_seed(cfg.seed, &[purpose])
}
