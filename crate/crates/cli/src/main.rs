use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use mbmpo::envs::RealEnv;
use mbmpo::harness::{
    ablate_exploration, config_to_toml, load_config, robustness_sweep, sweep, uncertainty_map, write_curves, Curve,
    SweepAxis, DEFAULT_PROBE_ACTIONS,
};
use mbmpo::orchestrator::{evaluate, run, Checkpoint, RunConfig};
use mbmpo::rng::{stream, tag};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(name = "mbmpo", version, about = "Model-based meta-policy optimization experiments")]
struct Cli {
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "runs")]
    out_dir: PathBuf,
    /// Suppresses per-iteration progress on stderr.
    #[arg(long, global = true)]
    quiet: bool,
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Dotted `key=value` override, repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Seeds {
    /// Seeds for the repeated runs; defaults to three consecutive seeds from `--seed`.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Trains one run and writes progress.csv and checkpoints.
    Train,
    /// Ensemble-std and adaptation-KL grid from a point2d checkpoint.
    UncertaintyMap {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 20)]
        resolution: usize,
    },
    /// Adaptive method against the α = 0 baseline under biased models.
    Robustness {
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.5, 1.0])]
        b_max: Vec<f64>,
        #[command(flatten)]
        seeds: Seeds,
    },
    /// One run per value of a hyperparameter.
    Sweep {
        /// alpha, ensemble_size or meta_steps.
        #[arg(long)]
        axis: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[command(flatten)]
        seeds: Seeds,
    },
    /// Collection with adapted policies against the pre-update policy.
    AblateExploration {
        #[command(flatten)]
        seeds: Seeds,
    },
    /// Real-environment return of a checkpoint's pre-update policy.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 100)]
        episodes: usize,
    },
}

fn base_config(cli: &Cli) -> mbmpo::Result<RunConfig> {
    let mut cfg = load_config(cli.config.as_deref(), &cli.overrides)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn seed_list(seeds: &Seeds, cfg: &RunConfig) -> Vec<u64> {
    if seeds.seeds.is_empty() {
        (0..3).map(|i| cfg.seed + i).collect()
    } else {
        seeds.seeds.clone()
    }
}

fn prepare_out_dir(dir: &Path, cfg: &RunConfig) -> mbmpo::Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.toml"), config_to_toml(cfg)?)?;
    Ok(())
}

fn curve_summary(curves: &[Curve]) -> Value {
    curves
        .iter()
        .map(|c| json!({ "label": c.label, "seed": c.seed, "final_return": c.final_return() }))
        .collect()
}

fn execute(cli: &Cli) -> mbmpo::Result<Value> {
    let quiet = cli.quiet;
    let mut progress = |label: &str, seed: u64, it: usize, ret: f64| {
        if !quiet {
            eprintln!("{label} seed {seed} iteration {it} return {ret:.3}");
        }
    };
    let out = cli.out_dir.as_path();
    match &cli.command {
        Command::Train => {
            let cfg = base_config(cli)?;
            prepare_out_dir(out, &cfg)?;
            let result = run(&cfg, Some(out), &mut |r| {
                progress("train", cfg.seed, r.iteration, r.avg_return);
            })?;
            Ok(json!({
                "command": "train",
                "iterations": result.records.len(),
                "final_return": result.final_return(),
                "real_env_transitions": result.real_env_transitions,
                "out_dir": out,
            }))
        }
        Command::UncertaintyMap { checkpoint, resolution } => {
            let ckpt = Checkpoint::load(checkpoint)?;
            let map = uncertainty_map(&ckpt, *resolution, &DEFAULT_PROBE_ACTIONS)?;
            fs::create_dir_all(out)?;
            let path = out.join("uncertainty_map.csv");
            map.write_csv(&path)?;
            Ok(json!({ "command": "uncertainty-map", "spearman": map.spearman, "csv": path }))
        }
        Command::Robustness { b_max, seeds } => {
            let cfg = base_config(cli)?;
            prepare_out_dir(out, &cfg)?;
            let curves = robustness_sweep(&cfg, b_max, &seed_list(seeds, &cfg), Some(out), &mut progress)?;
            write_curves(&out.join("curves.csv"), &curves)?;
            Ok(json!({ "command": "robustness", "curves": curve_summary(&curves) }))
        }
        Command::Sweep { axis, values, seeds } => {
            let axis: SweepAxis = axis.parse()?;
            let cfg = base_config(cli)?;
            prepare_out_dir(out, &cfg)?;
            let curves = sweep(&cfg, axis, values, &seed_list(seeds, &cfg), Some(out), &mut progress)?;
            write_curves(&out.join("curves.csv"), &curves)?;
            Ok(json!({ "command": "sweep", "axis": axis.to_string(), "curves": curve_summary(&curves) }))
        }
        Command::AblateExploration { seeds } => {
            let cfg = base_config(cli)?;
            prepare_out_dir(out, &cfg)?;
            let ab = ablate_exploration(&cfg, &seed_list(seeds, &cfg), Some(out), &mut progress)?;
            write_curves(&out.join("curves.csv"), &ab.curves)?;
            Ok(json!({
                "command": "ablate-exploration",
                "tailored_mean_final": ab.tailored_mean_final,
                "pre_update_mean_final": ab.pre_update_mean_final,
                "final_return_ratio": ab.final_return_ratio,
            }))
        }
        Command::Eval { checkpoint, episodes } => {
            let ckpt = Checkpoint::load(checkpoint)?;
            let seed = cli.seed.unwrap_or(ckpt.config.seed);
            let mut env = RealEnv::new(ckpt.config.env);
            let mut rng = stream(seed, &[tag::EVAL]);
            let (mean, std) = evaluate(&ckpt.policy, &mut env, *episodes, &mut rng)?;
            Ok(json!({ "command": "eval", "episodes": episodes, "mean_return": mean, "std_return": std }))
        }
    }
}

fn error_line(kind: &str, message: &str) -> String {
    json!({ "error": { "kind": kind, "message": message } }).to_string()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            eprintln!("{}", error_line("usage", e.to_string().trim()));
            return ExitCode::from(2);
        }
    };
    match execute(&cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", error_line(&e.kind().to_string(), &e.to_string()));
            ExitCode::FAILURE
        }
    }
}
