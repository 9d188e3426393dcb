//! Acceptance suite. Prints one PASS/FAIL line per criterion and a summary.
//! `MBMPO_ACCEPTANCE=1,2,7` restricts the run to the listed criteria, and
//! `MBMPO_ACCEPTANCE_STRICT=1` makes any failure a nonzero exit.

mod common;

use std::collections::BTreeSet;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::{fd_gradient, rel_err, returns_to_go, RandomProblem};
use mbmpo::diffcore::{grad, value, Matrix};
use mbmpo::dynamics::{train_ensemble, DynamicsTrainConfig, ModelEnsemble, TransitionBuffer};
use mbmpo::harness::{uncertainty_map, DEFAULT_PROBE_ACTIONS};
use mbmpo::metaopt::{meta_gradient, meta_surrogate, surrogate_gradient, AdaptationData, ModelTask, PostUpdateData};
use mbmpo::orchestrator::{checkpoint_path, run, Checkpoint, PerturbationConfig, RunConfig, RunResult};
use mbmpo::policy::GaussianPolicy;
use mbmpo::sampling::{gae, LinearBaseline, Source, Trajectory, TrajectoryBatch};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

/// Scripted point2d controller, 10⁴ episodes, seed 12345.
const POINT2D_ORACLE_RETURN: f64 = -14.7551;
/// Uniform random point2d controller, 10⁴ episodes, seed 12345.
const POINT2D_RANDOM_RETURN: f64 = -83.4136;
const SEEDS: [u64; 3] = [0, 1, 2];
const ROBUSTNESS_ITERATIONS: usize = 20;
const ROBUSTNESS_EVAL_EPISODES: usize = 50;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn ac1_gradient_fidelity() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1001);
    let mut worst: f64 = 0.0;
    let mut max_params = 0;
    for _ in 0..50 {
        let p = RandomProblem::sample(&mut rng, 500);
        max_params = max_params.max(p.params.len());
        let (_, g) = grad(&p.params, |t| p.record(t)).expect("gradient");
        let f = |x: &[f64]| value(&p.params.with_values(x.to_vec()).unwrap(), |t| p.record(t)).unwrap();
        let fd = fd_gradient(f, p.params.values(), 1e-6);
        worst = worst.max(rel_err(g.values(), &fd, 1e-8));
    }
    let elapsed = start.elapsed();
    verdict(
        worst <= 1e-5 && elapsed <= Duration::from_secs(60),
        format!("worst relative error {worst:.2e} over 50 networks (≤ {max_params} params), {elapsed:.1?}"),
    )
}

fn toy_tasks(rng: &mut ChaCha8Rng, policy: &GaussianPolicy, k: usize) -> Vec<ModelTask> {
    let (sd, ad) = (policy.state_dim(), policy.action_dim());
    (0..k)
        .map(|_| {
            let n = rng.gen_range(4..=10);
            let mut matrix = |cols: usize| {
                Matrix::from_vec(n, cols, (0..n * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
            };
            let pre_s = matrix(sd);
            let pre_a = matrix(ad);
            let post_s = matrix(sd);
            let post_a = matrix(ad);
            let pre_adv = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let post_adv = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let old_lp = policy
                .log_prob_batch(&post_s, &post_a)
                .unwrap()
                .into_iter()
                .map(|l| l + rng.gen_range(-0.1..0.1))
                .collect();
            ModelTask {
                pre: AdaptationData::new(pre_s, pre_a, pre_adv).unwrap(),
                post: PostUpdateData::new(policy, post_s, post_a, old_lp, post_adv).unwrap(),
            }
        })
        .collect()
}

fn ac2_meta_gradient_fidelity() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2002);
    let (mut worst, mut max_params) = (0.0f64, 0);
    let mut zero_alpha_exact = true;
    for case in 0..10 {
        let sd = rng.gen_range(1..=2);
        let ad = rng.gen_range(1..=2);
        let hidden: Vec<usize> = if case % 2 == 0 { vec![] } else { vec![rng.gen_range(2..=5)] };
        let spec = GaussianPolicy::default_spec(sd, ad, &hidden).unwrap();
        let policy = GaussianPolicy::init(spec, &mut rng).unwrap();
        assert!(policy.params().len() <= 50);
        max_params = max_params.max(policy.params().len());
        let k = 1 + case % 3;
        let tasks = toy_tasks(&mut rng, &policy, k);
        let theta = policy.params();
        let g = meta_gradient(policy.spec(), theta, 1e-3, &tasks).unwrap();
        let f = |x: &[f64]| meta_surrogate(policy.spec(), &theta.with_values(x.to_vec()).unwrap(), 1e-3, &tasks).unwrap();
        let fd = fd_gradient(f, theta.values(), 1e-5);
        worst = worst.max(rel_err(g.values(), &fd, 1e-8));

        let mut acc = vec![0.0; theta.len()];
        for t in &tasks {
            for (a, v) in acc.iter_mut().zip(surrogate_gradient(policy.spec(), theta, &t.post).unwrap().values()) {
                *a += v;
            }
        }
        let inv_k = 1.0 / k as f64;
        let plain: Vec<f64> = acc.into_iter().map(|v| v * inv_k).collect();
        let g0 = meta_gradient(policy.spec(), theta, 0.0, &tasks).unwrap();
        zero_alpha_exact &= g0.values() == plain.as_slice();
    }
    let elapsed = start.elapsed();
    verdict(
        worst <= 1e-3 && zero_alpha_exact && elapsed <= Duration::from_secs(60),
        format!(
            "worst relative error {worst:.2e} over 10 configurations (≤ {max_params} params), α = 0 bit-identical: {zero_alpha_exact}, {elapsed:.1?}"
        ),
    )
}

struct SeedRun {
    result: RunResult,
    elapsed: Duration,
    spearman: Option<f64>,
}

fn main_runs(root: &Path) -> Vec<SeedRun> {
    SEEDS
        .iter()
        .map(|&seed| {
            let cfg = RunConfig {
                seed,
                ..RunConfig::default()
            };
            let dir = root.join(format!("seed{seed}"));
            let start = Instant::now();
            let result = run(&cfg, Some(&dir), &mut |r| {
                eprintln!("  seed {seed} iteration {:2} return {:8.3}", r.iteration, r.avg_return)
            })
            .expect("training run");
            let elapsed = start.elapsed();
            let ckpt = Checkpoint::load(&checkpoint_path(&dir, cfg.n_iterations)).expect("final checkpoint");
            let map = uncertainty_map(&ckpt, 20, &DEFAULT_PROBE_ACTIONS).expect("uncertainty map");
            SeedRun {
                result,
                elapsed,
                spearman: map.spearman,
            }
        })
        .collect()
}

fn ac3_learning(runs: &[SeedRun]) -> Verdict {
    let n_iter = runs[0].result.records.len();
    let curve: Vec<f64> = (0..n_iter)
        .map(|i| runs.iter().map(|r| r.result.records[i].avg_return).sum::<f64>() / runs.len() as f64)
        .collect();
    let (best_it, best) = curve
        .iter()
        .copied()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap();
    let score = |r: f64| (r - POINT2D_RANDOM_RETURN) / (POINT2D_ORACLE_RETURN - POINT2D_RANDOM_RETURN);
    let final_mean = *curve.last().unwrap();
    let samples = runs[0].result.records.last().unwrap().real_env_samples_total;
    let slowest = runs.iter().map(|r| r.elapsed).max().unwrap();
    verdict(
        score(best) >= 0.9 && samples <= 30_000 && slowest <= Duration::from_secs(15 * 60),
        format!(
            "best 3-seed mean {best:.2} at iteration {} (score {:.3}), final {final_mean:.2} (score {:.3}, cost ratio {:.3}), oracle {POINT2D_ORACLE_RETURN}, {samples} real samples, slowest seed {slowest:.0?}",
            best_it + 1,
            score(best),
            score(final_mean),
            POINT2D_ORACLE_RETURN / final_mean,
        ),
    )
}

fn ac4_correlation(runs: &[SeedRun]) -> Verdict {
    let rhos: Vec<Option<f64>> = runs.iter().map(|r| r.spearman).collect();
    let positive = rhos.iter().filter(|r| r.is_some_and(|v| v > 0.3)).count();
    let shown: Vec<String> = rhos
        .iter()
        .map(|r| r.map_or("undefined".into(), |v| format!("{v:.3}")))
        .collect();
    verdict(positive >= 2, format!("Spearman ρ per seed [{}], {positive}/3 above 0.3", shown.join(", ")))
}

fn ac6_trust_region(runs: &[SeedRun]) -> Verdict {
    let delta = RunConfig::default().trpo.kl_bound;
    let (mut accepted, mut rejected, mut violations, mut max_kl) = (0, 0, 0, 0.0f64);
    for r in runs {
        for step in r.result.records.iter().flat_map(|rec| &rec.meta_steps) {
            if step.accepted {
                accepted += 1;
                max_kl = max_kl.max(step.kl);
                if step.kl > 1.5 * delta || step.surrogate_after < step.surrogate_before {
                    violations += 1;
                }
            } else {
                rejected += 1;
                if !step.theta_unchanged {
                    violations += 1;
                }
            }
        }
    }
    verdict(
        violations == 0,
        format!("{accepted} accepted steps (max KL {max_kl:.5}), {rejected} rejected, {violations} violations"),
    )
}

fn ac9_ledger(runs: &[SeedRun]) -> Verdict {
    let cfg = RunConfig::default();
    let n = cfg.n_iterations as u64;
    let budget = cfg.real_transitions_per_iter as u64;
    let eval = (cfg.eval_episodes * cfg.horizon()) as u64;
    let mut ok = true;
    for r in runs {
        ok &= r.result.real_env_transitions == n * budget + n * eval;
        ok &= r.result.eval_transitions == n * eval;
        for (i, rec) in r.result.records.iter().enumerate() {
            ok &= rec.real_env_samples_total == (i as u64 + 1) * budget;
        }
    }
    verdict(
        ok,
        format!(
            "after {n} iterations: {} transitions = {n} × {budget} + {n} × {eval} evaluation",
            runs[0].result.real_env_transitions
        ),
    )
}

fn robustness_run(seed: u64, alpha: f64, b_max: f64) -> f64 {
    let cfg = RunConfig {
        seed,
        alpha,
        n_iterations: ROBUSTNESS_ITERATIONS,
        eval_episodes: ROBUSTNESS_EVAL_EPISODES,
        perturbation: Some(PerturbationConfig { b_max, noise_std: 0.1 }),
        ..RunConfig::default()
    };
    let result = run(&cfg, None, &mut |r| {
        eprintln!(
            "  b_max {b_max} α {alpha} seed {seed} iteration {:2} return {:8.3}",
            r.iteration, r.avg_return
        )
    })
    .expect("robustness run");
    result.final_return()
}

fn ac5_robustness() -> Verdict {
    let mean = |alpha: f64, b_max: f64| SEEDS.iter().map(|&s| robustness_run(s, alpha, b_max)).sum::<f64>() / 3.0;
    let adaptive = mean(1e-3, 0.5);
    let baseline = mean(0.0, 0.5);
    let strong = mean(1e-3, 1.0);
    verdict(
        adaptive > baseline && strong > POINT2D_RANDOM_RETURN,
        format!(
            "b_max 0.5: adaptive {adaptive:.2} vs α = 0 {baseline:.2}; b_max 1.0: adaptive {strong:.2} vs uniform random {POINT2D_RANDOM_RETURN} ({ROBUSTNESS_ITERATIONS} iterations)"
        ),
    )
}

fn ac7_gae_identity() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(7007);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (sd, horizon) = (rng.gen_range(1..=4), rng.gen_range(1..=40));
        let gamma = rng.gen_range(0.8..=1.0);
        let trajs = (0..rng.gen_range(1..=5))
            .map(|_| {
                let t = rng.gen_range(1..=horizon);
                let states =
                    Matrix::from_vec(t + 1, sd, (0..(t + 1) * sd).map(|_| rng.gen_range(-3.0..3.0)).collect()).unwrap();
                let rewards = (0..t).map(|_| rng.gen_range(-10.0..1.0)).collect();
                Trajectory::new(states, Matrix::zeros(t, 1), rewards, vec![0.0; t], Source::Real).unwrap()
            })
            .collect();
        let batch = TrajectoryBatch::new(trajs, None).unwrap();
        let baseline = LinearBaseline::fit(&batch, gamma, horizon).unwrap();
        let adv = gae(&batch, &baseline, gamma, 1.0).unwrap();
        let mut i = 0;
        for traj in &batch.trajectories {
            for (t, g) in returns_to_go(&traj.rewards, gamma).iter().enumerate() {
                let expected = g - baseline.predict(traj.states.row(t), t);
                worst = worst.max((adv[i] - expected).abs());
                i += 1;
            }
        }
    }
    verdict(worst <= 1e-10, format!("max |Â − (Ĝ − b)| = {worst:.2e} over 100 batches"))
}

fn linear_transitions(rng: &mut ChaCha8Rng, n: usize, buffer: &mut TransitionBuffer) {
    for _ in 0..n {
        let s = [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)];
        let a = [rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1)];
        buffer.push(&s, &a, &[s[0] + a[0], s[1] + a[1]]).unwrap();
    }
}

fn ac8_ensemble_training() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(8008);
    let cfg = DynamicsTrainConfig::default();
    let mut ensemble = ModelEnsemble::init(5, 2, 2, &RunConfig::default().model_hidden, 8).unwrap();
    let mut buffer = TransitionBuffer::new(2, 2);
    let rounds = 5;
    let mut report = None;
    for round in 0..rounds {
        linear_transitions(&mut rng, 3000, &mut buffer);
        report = Some(train_ensemble(&mut ensemble, &buffer, &cfg, round).unwrap());
    }
    let report = report.unwrap();
    let mut held_out = TransitionBuffer::new(2, 2);
    linear_transitions(&mut rng, 2000, &mut held_out);
    let (s, a, s_next) = held_out.all();
    let delta = s_next.zip_map(&s, |x, y| x - y);
    let mse: Vec<f64> = ensemble
        .models()
        .iter()
        .map(|m| {
            let pred = m.predict_batch(&s, &a).unwrap().zip_map(&s, |x, y| x - y);
            let (p, d) = (m.out_norm().normalize(&pred).unwrap(), m.out_norm().normalize(&delta).unwrap());
            p.zip_map(&d, |x, y| (x - y) * (x - y)).sum() / p.rows() as f64
        })
        .collect();
    let stopped = report.models.iter().filter(|m| m.stopped_early).count();
    let mut distinct = true;
    for i in 0..5 {
        for j in i + 1..5 {
            distinct &= ensemble.model(i).params() != ensemble.model(j).params();
        }
    }
    let worst = mse.iter().copied().fold(0.0, f64::max);
    let epochs: Vec<usize> = report.models.iter().map(|m| m.epochs).collect();
    verdict(
        worst <= 1e-3 && stopped >= 4 && distinct,
        format!(
            "held-out normalized MSE max {worst:.2e}, early stop {stopped}/5 (epochs {epochs:?}) after {rounds} warm-started rounds up to {} transitions, pairwise distinct: {distinct}",
            buffer.len()
        ),
    )
}

fn ac10_determinism(root: &Path) -> Verdict {
    let cfg = RunConfig {
        n_iterations: 3,
        seed: 77,
        ..RunConfig::default()
    };
    let read = |name: &str| {
        let dir = root.join(name);
        run(&cfg, Some(&dir), &mut |_| {}).expect("determinism run");
        std::fs::read(dir.join("progress.csv")).expect("progress.csv")
    };
    let (a, b) = (read("det_a"), read("det_b"));
    verdict(a == b && !a.is_empty(), format!("{} bytes, identical: {}", a.len(), a == b))
}

fn selected() -> BTreeSet<u32> {
    match std::env::var("MBMPO_ACCEPTANCE") {
        Ok(list) if !list.trim().is_empty() => list.split(',').filter_map(|s| s.trim().parse().ok()).collect(),
        _ => (1..=10).collect(),
    }
}

fn main() -> ExitCode {
    let want = selected();
    let root = tempfile::tempdir().expect("scratch directory");
    let mut results: Vec<(u32, &str, Verdict)> = Vec::new();
    let mut record = |id: u32, name: &'static str, v: Verdict| {
        println!("AC{id:<2} {} {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        results.push((id, name, v));
    };
    if want.contains(&1) {
        record(1, "gradient fidelity", ac1_gradient_fidelity());
    }
    if want.contains(&2) {
        record(2, "meta-gradient fidelity", ac2_meta_gradient_fidelity());
    }
    if want.contains(&7) {
        record(7, "GAE identity", ac7_gae_identity());
    }
    if want.contains(&8) {
        record(8, "ensemble training", ac8_ensemble_training());
    }
    if want.contains(&10) {
        record(10, "determinism", ac10_determinism(root.path()));
    }
    if [3, 4, 6, 9].iter().any(|c| want.contains(c)) {
        let runs = main_runs(root.path());
        if want.contains(&3) {
            record(3, "learning on point2d", ac3_learning(&runs));
        }
        if want.contains(&4) {
            record(4, "uncertainty/plasticity correlation", ac4_correlation(&runs));
        }
        if want.contains(&6) {
            record(6, "trust-region contract", ac6_trust_region(&runs));
        }
        if want.contains(&9) {
            record(9, "sample ledger", ac9_ledger(&runs));
        }
    }
    if want.contains(&5) {
        record(5, "robustness to biased models", ac5_robustness());
    }
    results.sort_by_key(|r| r.0);
    let failed: Vec<String> = results.iter().filter(|r| !r.2.pass).map(|r| format!("AC{}", r.0)).collect();
    println!(
        "acceptance: {}/{} criteria passed{}",
        results.len() - failed.len(),
        results.len(),
        if failed.is_empty() { String::new() } else { format!(" (failed: {})", failed.join(", ")) }
    );
    let strict = std::env::var("MBMPO_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    if failed.is_empty() || !strict {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
