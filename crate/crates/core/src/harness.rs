//! Experiment harness: configuration loading, the uncertainty/plasticity
//! grid map, robustness and hyperparameter sweeps, and the exploration
//! ablation.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::diffcore::Matrix;
use crate::envs::EnvKind;
use crate::error::{Error, Result};
use crate::orchestrator::{run, Checkpoint, PerturbationConfig, RunConfig, RunResult};
use crate::policy::kl_per_state;
use crate::sampling::csv_error;

/// Probe actions for the ensemble-std map.
pub const DEFAULT_PROBE_ACTIONS: [[f64; 2]; 5] = [[0.0, 0.0], [0.1, 0.0], [-0.1, 0.0], [0.0, 0.1], [0.0, -0.1]];
pub const GRID_BOUND: f64 = 2.0;

/// Reads an optional TOML file over the defaults and applies `key=value`
/// overrides with dotted keys (`trpo.kl_bound=0.02`). Values are parsed as
/// TOML and fall back to bare strings.
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let mut root = match path {
        Some(p) => fs::read_to_string(p)?
            .parse::<toml::Table>()
            .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
        None => toml::Table::new(),
    };
    for item in overrides {
        let (key, raw) = item
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{item}` is not of the form key=value")))?;
        set_dotted(&mut root, key.trim(), parse_value(raw.trim()))?;
    }
    let cfg: RunConfig = toml::Value::Table(root)
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_dotted(root: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("malformed key `{key}`")));
    }
    let mut table = root;
    for part in &parts[..parts.len() - 1] {
        let entry = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{part}` in `{key}` is not a section")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Renders a config as TOML.
pub fn config_to_toml(cfg: &RunConfig) -> Result<String> {
    toml::to_string(cfg).map_err(|e| Error::Config(e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub x: f64,
    pub y: f64,
    pub ensemble_std: f64,
    pub kl: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridMap {
    pub resolution: usize,
    pub cells: Vec<GridCell>,
    /// Rank correlation between the std and KL series; `None` when either is constant.
    pub spearman: Option<f64>,
}

impl GridMap {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
        for c in &self.cells {
            w.serialize(c).map_err(csv_error)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Cell centres of a `resolution × resolution` grid over `[−2, 2]²`, row-major in `y`.
pub fn grid_points(resolution: usize) -> Vec<[f64; 2]> {
    let step = 2.0 * GRID_BOUND / resolution as f64;
    let centre = |i: usize| -GRID_BOUND + (i as f64 + 0.5) * step;
    (0..resolution)
        .flat_map(|j| (0..resolution).map(move |i| [centre(i), centre(j)]))
        .collect()
}

/// Per-cell ensemble std (mean over coordinates and probe actions) and mean
/// `KL(π_θ ‖ π_θ'_k)` over models, plus their rank correlation. `θ` and the
/// `θ'_k` are the pair stored in the checkpoint's meta state.
pub fn uncertainty_map(ckpt: &Checkpoint, resolution: usize, probes: &[[f64; 2]]) -> Result<GridMap> {
    if ckpt.config.env != EnvKind::Point2d {
        return Err(Error::Config(format!(
            "the uncertainty map needs a point2d checkpoint, got {}",
            ckpt.config.env
        )));
    }
    if resolution == 0 || probes.is_empty() {
        return Err(Error::Precondition("resolution and probe set must be non-empty".into()));
    }
    let points = grid_points(resolution);
    let states = Matrix::from_rows(&points)?;
    let mut std_sum = vec![0.0; points.len()];
    if ckpt.ensemble.len() >= 2 {
        for probe in probes {
            let actions = Matrix::from_rows(&vec![*probe; points.len()])?;
            let std = ckpt.ensemble.ensemble_std_batch(&states, &actions)?;
            for (acc, row) in std_sum.iter_mut().zip(std.iter_rows()) {
                *acc += row.iter().sum::<f64>() / row.len() as f64;
            }
        }
    }
    let pre = ckpt.policy.with_params(ckpt.meta_state.theta.clone())?;
    let mut kl_sum = vec![0.0; points.len()];
    for adapted in &ckpt.meta_state.adapted {
        let post = ckpt.policy.with_params(adapted.clone())?;
        for (acc, kl) in kl_sum.iter_mut().zip(kl_per_state(&pre, &post, &states)?) {
            *acc += kl;
        }
    }
    let n_models = ckpt.meta_state.adapted.len().max(1) as f64;
    let cells: Vec<GridCell> = points
        .iter()
        .zip(std_sum.iter().zip(&kl_sum))
        .map(|(p, (s, k))| GridCell {
            x: p[0],
            y: p[1],
            ensemble_std: s / probes.len() as f64,
            kl: k / n_models,
        })
        .collect();
    let xs: Vec<f64> = cells.iter().map(|c| c.ensemble_std).collect();
    let ys: Vec<f64> = cells.iter().map(|c| c.kl).collect();
    Ok(GridMap {
        resolution,
        spearman: spearman(&xs, &ys),
        cells,
    })
}

/// Ranks starting at 1, ties sharing their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman's ρ as the Pearson correlation of average ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

/// One training run's learning curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub label: String,
    pub seed: u64,
    pub returns: Vec<f64>,
    pub real_transitions: u64,
    pub meta_steps_per_iter: Vec<usize>,
}

impl Curve {
    fn from_result(label: String, seed: u64, result: &RunResult) -> Self {
        Self {
            label,
            seed,
            returns: result.records.iter().map(|r| r.avg_return).collect(),
            real_transitions: result.real_env_transitions,
            meta_steps_per_iter: result.records.iter().map(|r| r.meta_steps.len()).collect(),
        }
    }

    pub fn final_return(&self) -> f64 {
        self.returns.last().copied().unwrap_or(f64::NAN)
    }
}

/// Mean final return over the curves carrying `label`.
pub fn mean_final_return(curves: &[Curve], label: &str) -> f64 {
    let finals: Vec<f64> = curves.iter().filter(|c| c.label == label).map(Curve::final_return).collect();
    finals.iter().sum::<f64>() / finals.len() as f64
}

fn run_labelled(
    cfg: &RunConfig,
    label: &str,
    out_dir: Option<&Path>,
    on_iteration: &mut dyn FnMut(&str, u64, usize, f64),
) -> Result<Curve> {
    let dir = out_dir.map(|d| d.join(format!("{label}_seed{}", cfg.seed)));
    let result = run(cfg, dir.as_deref(), &mut |r| on_iteration(label, cfg.seed, r.iteration, r.avg_return))?;
    Ok(Curve::from_result(label.to_string(), cfg.seed, &result))
}

fn require_non_empty<T>(v: &[T], what: &str) -> Result<()> {
    if v.is_empty() {
        return Err(Error::Precondition(format!("{what} must be non-empty")));
    }
    Ok(())
}

/// Progress callback `(label, seed, iteration, avg_return)`.
pub type Progress<'a> = &'a mut dyn FnMut(&str, u64, usize, f64);

/// The adaptive method and its `α = 0` counterpart under biased models,
/// one pair of runs per `b_max` and seed.
pub fn robustness_sweep(
    base: &RunConfig,
    b_max_list: &[f64],
    seeds: &[u64],
    out_dir: Option<&Path>,
    progress: Progress<'_>,
) -> Result<Vec<Curve>> {
    require_non_empty(b_max_list, "b_max list")?;
    require_non_empty(seeds, "seed list")?;
    let noise_std = base.perturbation.as_ref().map_or(0.1, |p| p.noise_std);
    let mut curves = Vec::new();
    for &b_max in b_max_list {
        for (method, alpha) in [("mbmpo", base.alpha), ("alpha0", 0.0)] {
            for &seed in seeds {
                let cfg = RunConfig {
                    seed,
                    alpha,
                    perturbation: Some(PerturbationConfig { b_max, noise_std }),
                    ..base.clone()
                };
                curves.push(run_labelled(&cfg, &format!("{method}_bmax{b_max}"), out_dir, progress)?);
            }
        }
    }
    Ok(curves)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Alpha,
    EnsembleSize,
    MetaSteps,
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepAxis::Alpha => "alpha",
            SweepAxis::EnsembleSize => "ensemble_size",
            SweepAxis::MetaSteps => "meta_steps",
        })
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "alpha" => Ok(SweepAxis::Alpha),
            "ensemble_size" | "ensemble-size" => Ok(SweepAxis::EnsembleSize),
            "meta_steps" | "meta-steps" => Ok(SweepAxis::MetaSteps),
            other => Err(Error::Config(format!("unknown sweep axis `{other}`"))),
        }
    }
}

fn as_count(v: f64, axis: SweepAxis) -> Result<usize> {
    if v >= 1.0 && v.fract() == 0.0 {
        Ok(v as usize)
    } else {
        Err(Error::Config(format!("{axis} values must be positive integers, got {v}")))
    }
}

/// One run per value of `axis` and seed.
pub fn sweep(
    base: &RunConfig,
    axis: SweepAxis,
    values: &[f64],
    seeds: &[u64],
    out_dir: Option<&Path>,
    progress: Progress<'_>,
) -> Result<Vec<Curve>> {
    require_non_empty(values, "sweep values")?;
    require_non_empty(seeds, "seed list")?;
    let mut curves = Vec::new();
    for &v in values {
        let mut cfg = base.clone();
        match axis {
            SweepAxis::Alpha => cfg.alpha = v,
            SweepAxis::EnsembleSize => cfg.ensemble_size = as_count(v, axis)?,
            SweepAxis::MetaSteps => cfg.meta_steps_per_iter = as_count(v, axis)?,
        }
        for &seed in seeds {
            let cfg = RunConfig { seed, ..cfg.clone() };
            curves.push(run_labelled(&cfg, &format!("{axis}{v}"), out_dir, progress)?);
        }
    }
    Ok(curves)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplorationAblation {
    pub curves: Vec<Curve>,
    pub tailored_mean_final: f64,
    pub pre_update_mean_final: f64,
    /// Tailored over pre-update mean final return.
    pub final_return_ratio: f64,
}

/// Paired runs collecting with the adapted policies versus the pre-update policy.
pub fn ablate_exploration(
    base: &RunConfig,
    seeds: &[u64],
    out_dir: Option<&Path>,
    progress: Progress<'_>,
) -> Result<ExplorationAblation> {
    require_non_empty(seeds, "seed list")?;
    let mut curves = Vec::new();
    for (label, tailored) in [("tailored", true), ("pre_update", false)] {
        for &seed in seeds {
            let cfg = RunConfig {
                seed,
                tailored_collection: tailored,
                ..base.clone()
            };
            curves.push(run_labelled(&cfg, label, out_dir, progress)?);
        }
    }
    let t = mean_final_return(&curves, "tailored");
    let p = mean_final_return(&curves, "pre_update");
    Ok(ExplorationAblation {
        curves,
        tailored_mean_final: t,
        pre_update_mean_final: p,
        final_return_ratio: t / p,
    })
}

/// Writes a table of curves, one row per (label, seed, iteration).
pub fn write_curves(path: &Path, curves: &[Curve]) -> Result<()> {
    #[derive(Serialize)]
    struct Row<'a> {
        label: &'a str,
        seed: u64,
        iteration: usize,
        avg_return: f64,
    }
    let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
    for c in curves {
        for (i, r) in c.returns.iter().enumerate() {
            w.serialize(Row {
                label: &c.label,
                seed: c.seed,
                iteration: i,
                avg_return: *r,
            })
            .map_err(csv_error)?;
        }
    }
    w.flush()?;
    Ok(())
}
