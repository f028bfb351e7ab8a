//! Command-line entry point. Configuration layers, lowest to highest
//! precedence: built-in defaults, `--config` file, repeated `--set key=value`
//! overrides, then the dedicated flags below. The subcommand fixes the mode.

use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use tcrl::config::{Mode, PlanModel, RunConfig};
use tcrl::harness;
use tcrl::metrics::emit_csv;
use tcrl::Result;

#[derive(Parser)]
#[command(name = "tcrl", version, about = "Latent temporal-consistency RL on classic control")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train the model-free agent on latent states (policy + critic + model).
    Train(RunArgs),
    /// Train a dynamics model and act through the sampling planner.
    Plan(PlanArgs),
    /// Evaluate a checkpoint and print return statistics as JSON.
    Eval(EvalArgs),
    /// Run the horizon / n-step / latent-loss ablation grid.
    Ablate(AblateArgs),
    /// Convert a metrics stream into one CSV file per recorded metric.
    EmitCsv(EmitCsvArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Environment: pendulum_swingup, cartpole_swingup, or point_mass
    #[arg(long)]
    task: Option<String>,
    /// Master seed; every random stream derives from it
    #[arg(long)]
    seed: Option<u64>,
    /// Total environment steps (seed episodes included)
    #[arg(long)]
    steps: Option<u64>,
    /// Run directory for metrics.jsonl and ckpt_<step>.bin
    #[arg(long)]
    out: Option<PathBuf>,
    /// Flat `key = value` config file applied over the defaults
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-key override, e.g. --set td.gamma=0.995 (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Resume this checkpoint with its embedded config (other flags ignored)
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Latent consistency distance: cosine, mse, or none
    #[arg(long)]
    latent_loss: Option<String>,
    /// Weight on the latent consistency term (0 disables it)
    #[arg(long)]
    consistency_coef: Option<f64>,
    /// Model rollout horizon H
    #[arg(long)]
    rollout_horizon: Option<usize>,
    /// n-step return length for the critic target
    #[arg(long)]
    nstep: Option<usize>,
    /// Stop once mean eval return reaches this value
    #[arg(long)]
    target_return: Option<f64>,
    /// Checkpoint at the first episode boundary past each multiple
    #[arg(long)]
    checkpoint_every: Option<u64>,
    /// Record wall-clock ms per 1000 env steps (breaks bitwise determinism)
    #[arg(long)]
    emit_wall_ms: bool,
}

#[derive(Args)]
struct PlanArgs {
    /// Rollout model: tcrl (latent), ensdet, pets, or sim (ground truth)
    #[arg(long, default_value = "tcrl")]
    model: String,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint to evaluate
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, default_value_t = 10)]
    episodes: usize,
    /// Override the seed that derives evaluation episode initial states
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long, default_value = "pendulum_swingup")]
    task: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 30_000)]
    steps: u64,
    #[arg(long, default_value = "runs/ablate")]
    out: PathBuf,
    /// Applied to every grid cell, e.g. --set net.hidden=64,64
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Args)]
struct EmitCsvArgs {
    /// metrics.jsonl produced by train/plan
    #[arg(long)]
    metrics: PathBuf,
    /// Output directory (defaults to the metrics file's directory)
    #[arg(long)]
    out: Option<PathBuf>,
}

fn resolve(mode: Mode, args: &RunArgs) -> Result<(RunConfig, PathBuf)> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &args.config {
        cfg.apply_file(path)?;
    }
    cfg.apply_overrides(&args.sets)?;
    cfg.mode = mode;
    if let Some(v) = &args.task {
        cfg.set("task", v)?;
    }
    if let Some(v) = args.seed {
        cfg.set("seed", &v.to_string())?;
    }
    if let Some(v) = args.steps {
        cfg.set("total_env_steps", &v.to_string())?;
    }
    if let Some(v) = &args.latent_loss {
        cfg.set("model.latent_loss", v)?;
    }
    if let Some(v) = args.consistency_coef {
        cfg.set("model.consistency_coef", &v.to_string())?;
    }
    if let Some(v) = args.rollout_horizon {
        cfg.set("model.horizon", &v.to_string())?;
    }
    if let Some(v) = args.nstep {
        cfg.set("td.nstep", &v.to_string())?;
    }
    if let Some(v) = args.target_return {
        cfg.set("target_return", &v.to_string())?;
    }
    if let Some(v) = args.checkpoint_every {
        cfg.set("checkpoint_every", &v.to_string())?;
    }
    if args.emit_wall_ms {
        cfg.emit_wall_ms = true;
    }
    let out = args.out.clone().unwrap_or_else(|| {
        PathBuf::from(format!(
            "runs/{}_{}_seed{}",
            cfg.mode.name(),
            cfg.task,
            cfg.seed
        ))
    });
    Ok((cfg, out))
}

fn print_summary(run_dir: &std::path::Path, summary: &harness::RunSummary) {
    println!(
        "{}",
        serde_json::json!({
            "run_dir": run_dir,
            "env_step": summary.env_step,
            "episodes": summary.episodes,
            "final_eval": summary.final_eval,
        })
    );
}

fn run_or_resume(mode: Mode, args: &RunArgs) -> Result<()> {
    if let Some(ckpt) = &args.resume {
        let run_dir = args
            .out
            .clone()
            .or_else(|| ckpt.parent().map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("."));
        let summary = harness::resume(ckpt, &run_dir)?;
        print_summary(&run_dir, &summary);
        return Ok(());
    }
    let (cfg, run_dir) = resolve(mode, args)?;
    let summary = harness::run(cfg, &run_dir)?;
    print_summary(&run_dir, &summary);
    Ok(())
}

fn cmd_plan(args: &PlanArgs) -> Result<()> {
    let model = PlanModel::parse(&args.model)?;
    let mode = if model == PlanModel::Tcrl {
        Mode::TcrlDynamics
    } else {
        Mode::BaselinePlan
    };
    let (mut cfg, run_dir) = resolve(mode, &args.run)?;
    cfg.plan_model = model;
    if args.run.resume.is_some() {
        return run_or_resume(mode, &args.run);
    }
    let summary = harness::run(cfg, &run_dir)?;
    print_summary(&run_dir, &summary);
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let mut state = tcrl::checkpoint::load(&args.ckpt)?;
    if let Some(seed) = args.seed {
        state.cfg.seed = seed;
    }
    let stats = harness::evaluate_state(&state, args.episodes, 0)?;
    println!(
        "{}",
        serde_json::json!({
            "ckpt": args.ckpt,
            "task": state.cfg.task,
            "episodes": args.episodes,
            "mean": stats.mean,
            "std": stats.std,
            "min": stats.min,
            "max": stats.max,
        })
    );
    Ok(())
}

fn cmd_ablate(args: &AblateArgs) -> Result<()> {
    // horizon sweep, n-step sweep, and the MSE-latent variant
    let cells: Vec<(String, Vec<(String, String)>)> = [1usize, 3, 5, 10]
        .iter()
        .map(|h| (format!("h{h}"), vec![("model.horizon".into(), h.to_string())]))
        .chain(
            [1usize, 3, 5]
                .iter()
                .map(|n| (format!("n{n}"), vec![("td.nstep".into(), n.to_string())])),
        )
        .chain(std::iter::once((
            "mse".to_string(),
            vec![("model.latent_loss".into(), "mse".into())],
        )))
        .collect();

    for (name, overrides) in cells {
        let mut cfg = RunConfig::default();
        cfg.mode = Mode::Tcrl;
        cfg.set("task", &args.task)?;
        cfg.set("seed", &args.seed.to_string())?;
        cfg.set("total_env_steps", &args.steps.to_string())?;
        cfg.apply_overrides(&args.sets)?;
        for (k, v) in &overrides {
            cfg.set(k, v)?;
        }
        let run_dir = args.out.join(&name);
        let summary = harness::run(cfg, &run_dir)?;
        println!(
            "{}",
            serde_json::json!({
                "cell": name,
                "run_dir": run_dir,
                "env_step": summary.env_step,
                "final_eval": summary.final_eval,
            })
        );
    }
    Ok(())
}

fn cmd_emit_csv(args: &EmitCsvArgs) -> Result<()> {
    let out = args.out.clone().unwrap_or_else(|| {
        args.metrics
            .parent()
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("."))
    });
    std::fs::create_dir_all(&out)?;
    let written = emit_csv(&args.metrics, &out)?;
    use std::io::Write;
    let mut stdout = std::io::stdout().lock();
    for path in written {
        if writeln!(stdout, "{}", path.display()).is_err() {
            break; // downstream closed the pipe
        }
    }
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    let result = match &cli.cmd {
        Cmd::Train(args) => run_or_resume(Mode::Tcrl, args),
        Cmd::Plan(args) => cmd_plan(args),
        Cmd::Eval(args) => cmd_eval(args),
        Cmd::Ablate(args) => cmd_ablate(args),
        Cmd::EmitCsv(args) => cmd_emit_csv(args),
    };
    if let Err(err) = result {
        eprintln!("error: {err}");
        std::process::exit(1);
    }
}
