//! Resolved experiment configuration.
//!
//! Defaults follow the reference hyperparameter table (seed episodes 10,
//! action repeat 2, update frequency 2, batch 512, lr 3e-4, n-step 3,
//! rollout horizon 5, MPPI 512/64/6). Values load in three layers with
//! later layers winning: a flat `key = value` config file, repeated
//! `--set key=value` overrides, then dedicated CLI flags. The fully
//! resolved config is echoed as the first metrics row of every run.

use crate::agent::{ExplorationSchedule, TdConfig};
use crate::baselines::EnsembleSpec;
use crate::envs::Task;
use crate::error::{Error, Result};
use crate::networks::NetSizes;
use crate::planner::MppiConfig;
use crate::repr::{LatentLoss, ModelLossConfig};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Training protocol.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Policy learning: latent model + actor-critic.
    Tcrl,
    /// Iterative model learning + MPPI acting with the latent model.
    TcrlDynamics,
    /// Same planning protocol driven by a baseline model.
    BaselinePlan,
}

impl Mode {
    pub fn parse(s: &str) -> Result<Mode> {
        match s {
            "tcrl" => Ok(Mode::Tcrl),
            "tcrl_dynamics" => Ok(Mode::TcrlDynamics),
            "baseline_plan" => Ok(Mode::BaselinePlan),
            other => Err(Error::config(format!(
                "unknown mode {other:?}; expected tcrl, tcrl_dynamics or baseline_plan"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Mode::Tcrl => "tcrl",
            Mode::TcrlDynamics => "tcrl_dynamics",
            Mode::BaselinePlan => "baseline_plan",
        }
    }
}

/// Which model backs the planner in the planning protocols.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanModel {
    /// Latent dynamics learned by temporal consistency.
    Tcrl,
    /// Deterministic observation-space ensemble.
    Ensdet,
    /// Gaussian one-step ensemble.
    Pets,
    /// The true simulator (upper-bound diagnostic; nothing is learned).
    Sim,
}

impl PlanModel {
    pub fn parse(s: &str) -> Result<PlanModel> {
        match s {
            "tcrl" => Ok(PlanModel::Tcrl),
            "ensdet" => Ok(PlanModel::Ensdet),
            "pets" => Ok(PlanModel::Pets),
            "sim" => Ok(PlanModel::Sim),
            other => Err(Error::config(format!(
                "unknown plan model {other:?}; expected tcrl, ensdet, pets or sim"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            PlanModel::Tcrl => "tcrl",
            PlanModel::Ensdet => "ensdet",
            PlanModel::Pets => "pets",
            PlanModel::Sim => "sim",
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub task: String,
    pub mode: Mode,
    pub seed: u64,
    pub total_env_steps: u64,
    pub seed_episodes: usize,
    pub action_repeat: usize,
    pub update_frequency: usize,
    pub batch_size: usize,
    /// Model / ensemble learning rate (the TD side has its own).
    pub lr: f64,
    /// EMA coefficient for every momentum copy.
    pub tau: f64,
    pub eval_every: u64,
    pub eval_episodes: usize,
    /// Replay capacity in closed episodes.
    pub replay_episodes: usize,
    /// Planner backend for the planning protocols.
    pub plan_model: PlanModel,
    /// Stop once an evaluation mean reaches this return.
    pub target_return: Option<f64>,
    /// Write a checkpoint at the first episode boundary at or after every
    /// multiple of this step count (the final state is always written).
    pub checkpoint_every: Option<u64>,
    /// Include wall-clock timings in metrics (off by default: timing rows
    /// would break bitwise output determinism).
    pub emit_wall_ms: bool,
    pub net: NetSizes,
    pub model: ModelLossConfig,
    pub td: TdConfig,
    pub explore: ExplorationSchedule,
    pub mppi: MppiConfig,
    pub ensemble: EnsembleSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            task: "pendulum_swingup".to_owned(),
            mode: Mode::Tcrl,
            seed: 0,
            total_env_steps: 100_000,
            seed_episodes: 10,
            action_repeat: 2,
            update_frequency: 2,
            batch_size: 512,
            lr: 3e-4,
            tau: 0.005,
            eval_every: 10_000,
            eval_episodes: 10,
            replay_episodes: 1000,
            plan_model: PlanModel::Tcrl,
            target_return: None,
            checkpoint_every: None,
            emit_wall_ms: false,
            net: NetSizes::default(),
            model: ModelLossConfig::default(),
            td: TdConfig::default(),
            explore: ExplorationSchedule::default(),
            mppi: MppiConfig::default(),
            ensemble: EnsembleSpec::default(),
        }
    }
}

impl RunConfig {
    pub fn task_parsed(&self) -> Result<Task> {
        Task::parse(&self.task)
    }

    pub fn validate(&self) -> Result<()> {
        self.task_parsed()?;
        if self.action_repeat < 1 {
            return Err(Error::config("action repeat must be >= 1"));
        }
        if self.update_frequency < 1 {
            return Err(Error::config("update frequency must be >= 1"));
        }
        if self.batch_size < 1 {
            return Err(Error::config("batch size must be >= 1"));
        }
        if self.seed_episodes < 1 {
            return Err(Error::config("need at least one seed episode"));
        }
        if self.eval_every < 1 {
            return Err(Error::config("eval interval must be >= 1"));
        }
        if self.eval_episodes < 1 {
            return Err(Error::config("need at least one eval episode"));
        }
        if self.replay_episodes < 1 {
            return Err(Error::config("replay must hold at least one episode"));
        }
        if self.lr <= 0.0 || !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::config("need lr > 0 and tau in [0, 1]"));
        }
        if self.net.latent_dim < 1 {
            return Err(Error::config("latent dim must be >= 1"));
        }
        self.model.validate()?;
        self.td.validate()?;
        self.explore.validate()?;
        self.mppi.validate()?;
        self.ensemble.validate()?;
        Ok(())
    }

    /// Apply one `key = value` override using dotted config paths.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        fn p<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::config(format!("bad value {v:?} for {key}")))
        }
        fn hidden_list(key: &str, v: &str) -> Result<Vec<usize>> {
            v.split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| p::<usize>(key, s))
                .collect()
        }
        match key {
            "task" => self.task = v.to_owned(),
            "mode" => self.mode = Mode::parse(v)?,
            "seed" => self.seed = p(key, v)?,
            "total_env_steps" => self.total_env_steps = p(key, v)?,
            "seed_episodes" => self.seed_episodes = p(key, v)?,
            "action_repeat" => self.action_repeat = p(key, v)?,
            "update_frequency" => self.update_frequency = p(key, v)?,
            "batch_size" => self.batch_size = p(key, v)?,
            "lr" => self.lr = p(key, v)?,
            "tau" => self.tau = p(key, v)?,
            "eval_every" => self.eval_every = p(key, v)?,
            "eval_episodes" => self.eval_episodes = p(key, v)?,
            "replay_episodes" => self.replay_episodes = p(key, v)?,
            "plan_model" => self.plan_model = PlanModel::parse(v)?,
            "target_return" => {
                self.target_return = if v == "none" { None } else { Some(p(key, v)?) }
            }
            "checkpoint_every" => {
                self.checkpoint_every = if v == "none" { None } else { Some(p(key, v)?) }
            }
            "emit_wall_ms" => self.emit_wall_ms = p(key, v)?,
            "net.latent_dim" => self.net.latent_dim = p(key, v)?,
            "net.hidden" => self.net.hidden = hidden_list(key, v)?,
            "model.horizon" => self.model.horizon = p(key, v)?,
            "model.rho" => self.model.rho = p(key, v)?,
            "model.reward_coef" => self.model.reward_coef = p(key, v)?,
            "model.consistency_coef" => self.model.consistency_coef = p(key, v)?,
            "model.latent_loss" => self.model.latent_loss = LatentLoss::parse(v)?,
            "td.gamma" => self.td.gamma = p(key, v)?,
            "td.nstep" => self.td.nstep = p(key, v)?,
            "td.critic_lr" => self.td.critic_lr = p(key, v)?,
            "td.actor_lr" => self.td.actor_lr = p(key, v)?,
            "td.critic_updates_encoder" => self.td.critic_updates_encoder = p(key, v)?,
            "explore.schedule" => {
                let clip = self.explore.clip;
                self.explore = ExplorationSchedule::parse(v)?;
                self.explore.clip = clip;
            }
            "explore.clip" => self.explore.clip = p(key, v)?,
            "mppi.horizon" => self.mppi.horizon = p(key, v)?,
            "mppi.population" => self.mppi.population = p(key, v)?,
            "mppi.elites" => self.mppi.elites = p(key, v)?,
            "mppi.iterations" => self.mppi.iterations = p(key, v)?,
            "mppi.temperature" => self.mppi.temperature = p(key, v)?,
            "mppi.momentum" => self.mppi.momentum = p(key, v)?,
            "mppi.reuse_solution" => self.mppi.reuse_solution = p(key, v)?,
            "mppi.std_init" => self.mppi.std_init = p(key, v)?,
            "mppi.std_floor" => self.mppi.std_floor = p(key, v)?,
            "ensemble.members" => self.ensemble.members = p(key, v)?,
            "ensemble.hidden" => self.ensemble.hidden = hidden_list(key, v)?,
            other => return Err(Error::config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Apply a flat config file: one `key = value` per line, `#` comments.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)?;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config(format!(
                    "{}:{}: expected `key = value`, got {raw:?}",
                    path.display(),
                    lineno + 1
                ))
            })?;
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    /// Apply `key=value` strings from the command line.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        for kv in overrides {
            let (key, value) = kv
                .split_once('=')
                .ok_or_else(|| Error::config(format!("--set expects key=value, got {kv:?}")))?;
            self.set(key.trim(), value)?;
        }
        Ok(())
    }
}
