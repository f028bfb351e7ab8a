//! MPPI: population-based planning over any rollout model.
//!
//! Each decision step refits a per-timestep Gaussian over action sequences:
//! sample a population, score it by rolling the model forward and summing
//! predicted rewards (undiscounted, no terminal value), pick the top-K,
//! and move the solution toward the softmax-weighted elite statistics.
//! The executed action is the first mean entry of the final iterate.

use crate::error::{Error, Result};
use crate::math::{Mat, Real};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// Rollout interface the planner scores against: a learned latent model,
/// an observation-space ensemble, or the simulator itself.
pub trait RolloutModel<F: Real> {
    /// Per-candidate rollout state.
    type State;

    fn act_dim(&self) -> usize;

    /// Broadcast one observation into `population` rollout states.
    fn init(&self, obs: &[f64], population: usize) -> Result<Self::State>;

    /// Advance every candidate one plan step under its action row; returns
    /// the per-candidate reward estimates as a [population, 1] column.
    fn step(&self, state: &mut Self::State, actions: &Mat<F>, rng: &mut ChaCha8Rng)
        -> Result<Mat<F>>;
}

/// Per-timestep Gaussian over action sequences, shaped [horizon, act_dim].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "", deserialize = ""))] // Real already carries serde
pub struct PlanSolution<F: Real> {
    pub mean: Mat<F>,
    pub std: Mat<F>,
}

impl<F: Real> PlanSolution<F> {
    pub fn fresh(horizon: usize, act_dim: usize, std_init: f64) -> Self {
        PlanSolution {
            mean: Mat::zeros(horizon, act_dim),
            std: Mat::from_vec(
                horizon,
                act_dim,
                vec![F::from_f64(std_init); horizon * act_dim],
            ),
        }
    }

    /// Warm start for the next decision step: drop the executed first row,
    /// zero-pad the tail, and reset std to std_init everywhere.
    pub fn shifted_for_reuse(&self, std_init: f64) -> Self {
        let (h, a) = (self.mean.rows(), self.mean.cols());
        let mut mean = Mat::zeros(h, a);
        for row in 1..h {
            mean.row_mut(row - 1).copy_from_slice(self.mean.row(row));
        }
        PlanSolution {
            mean,
            std: Mat::from_vec(h, a, vec![F::from_f64(std_init); h * a]),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MppiConfig {
    /// Plan horizon (distinct from the model-loss rollout horizon).
    pub horizon: usize,
    pub population: usize,
    pub elites: usize,
    pub iterations: usize,
    pub temperature: f64,
    /// Weight on the old solution when blending in the elite statistics.
    pub momentum: f64,
    pub reuse_solution: bool,
    pub std_init: f64,
    pub std_floor: f64,
}

impl Default for MppiConfig {
    fn default() -> Self {
        MppiConfig {
            horizon: 12,
            population: 512,
            elites: 64,
            iterations: 6,
            temperature: 0.5,
            momentum: 0.1,
            reuse_solution: true,
            std_init: 0.5,
            std_floor: 0.05,
        }
    }
}

impl MppiConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon < 1 {
            return Err(Error::config("plan horizon must be >= 1"));
        }
        if !(1 <= self.elites && self.elites <= self.population) {
            return Err(Error::config("need 1 <= elites <= population"));
        }
        if self.iterations < 1 {
            return Err(Error::config("planner needs at least one iteration"));
        }
        if self.temperature <= 0.0 {
            return Err(Error::config("temperature must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum must be in [0, 1)"));
        }
        if self.std_init <= 0.0 || self.std_floor <= 0.0 {
            return Err(Error::config("std_init and std_floor must be positive"));
        }
        Ok(())
    }
}

/// Draw the candidate population: actions[h] is [population, act_dim],
/// sampled N(mean_h, std_h^2) elementwise and clamped into the action box.
pub fn sample_population<F: Real>(
    solution: &PlanSolution<F>,
    population: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Mat<F>> {
    let (horizon, act_dim) = (solution.mean.rows(), solution.mean.cols());
    let mut out = Vec::with_capacity(horizon);
    for h in 0..horizon {
        let mut step = Mat::zeros(population, act_dim);
        for p in 0..population {
            let row = step.row_mut(p);
            for (a, slot) in row.iter_mut().enumerate() {
                let eps: f64 = StandardNormal.sample(rng);
                let v = solution.mean.get(h, a).to_f64() + solution.std.get(h, a).to_f64() * eps;
                *slot = F::from_f64(v.clamp(-1.0, 1.0));
            }
        }
        out.push(step);
    }
    out
}

/// Undiscounted return of every candidate under the model.
pub fn score_trajectories<F: Real, M: RolloutModel<F>>(
    model: &M,
    obs: &[f64],
    actions: &[Mat<F>],
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    let population = actions[0].rows();
    let mut state = model.init(obs, population)?;
    let mut returns = vec![0.0; population];
    for step in actions {
        let rewards = model.step(&mut state, step, rng)?;
        for (acc, p) in returns.iter_mut().zip(0..population) {
            *acc += rewards.get(p, 0).to_f64();
        }
    }
    Ok(returns)
}

/// Indices of the K largest returns, ties broken by lower index.
pub fn elite_select(returns: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..returns.len()).collect();
    idx.sort_by(|&a, &b| {
        returns[b]
            .partial_cmp(&returns[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx.truncate(k);
    idx
}

/// Max-subtracted softmax over elite returns.
pub fn softmax_weights(elite_returns: &[f64], temperature: f64) -> Vec<f64> {
    let max = elite_returns.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut w: Vec<f64> = elite_returns
        .iter()
        .map(|r| ((r - max) / temperature).exp())
        .collect();
    let sum: f64 = w.iter().sum();
    for v in &mut w {
        *v /= sum;
    }
    w
}

/// One MPPI refinement step: sample, score, reweight elites, blend.
pub fn mppi_iterate<F: Real, M: RolloutModel<F>>(
    model: &M,
    obs: &[f64],
    solution: &PlanSolution<F>,
    cfg: &MppiConfig,
    rng: &mut ChaCha8Rng,
) -> Result<PlanSolution<F>> {
    let actions = sample_population(solution, cfg.population, rng);
    let returns = score_trajectories(model, obs, &actions, rng)?;
    let elites = elite_select(&returns, cfg.elites);
    let elite_returns: Vec<f64> = elites.iter().map(|&i| returns[i]).collect();
    let weights = softmax_weights(&elite_returns, cfg.temperature);

    let (horizon, act_dim) = (solution.mean.rows(), solution.mean.cols());
    let mut mean = Mat::zeros(horizon, act_dim);
    let mut std = Mat::zeros(horizon, act_dim);
    for h in 0..horizon {
        for a in 0..act_dim {
            let mut m = 0.0;
            for (&e, &w) in elites.iter().zip(&weights) {
                m += w * actions[h].get(e, a).to_f64();
            }
            let mut var = 0.0;
            for (&e, &w) in elites.iter().zip(&weights) {
                let d = actions[h].get(e, a).to_f64() - m;
                var += w * d * d;
            }
            let old_m = solution.mean.get(h, a).to_f64();
            let old_s = solution.std.get(h, a).to_f64();
            let blended_m = cfg.momentum * old_m + (1.0 - cfg.momentum) * m;
            let blended_s = cfg.momentum * old_s + (1.0 - cfg.momentum) * var.sqrt();
            mean.set(h, a, F::from_f64(blended_m));
            std.set(h, a, F::from_f64(blended_s.max(cfg.std_floor)));
        }
    }
    Ok(PlanSolution { mean, std })
}

/// Full decision step: warm-start (or reset), run J iterations, execute the
/// first mean action. The returned solution seeds the next call.
pub fn plan_action<F: Real, M: RolloutModel<F>>(
    model: &M,
    obs: &[f64],
    prev: Option<&PlanSolution<F>>,
    cfg: &MppiConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<f64>, PlanSolution<F>)> {
    let mut solution = match prev {
        Some(p) if cfg.reuse_solution => p.shifted_for_reuse(cfg.std_init),
        _ => PlanSolution::fresh(cfg.horizon, model.act_dim(), cfg.std_init),
    };
    for _ in 0..cfg.iterations {
        solution = mppi_iterate(model, obs, &solution, cfg, rng)?;
    }
    let action = solution.mean.row(0).iter().map(|v| v.to_f64()).collect();
    Ok((action, solution))
}
