//! Model-free actor-critic on latent states: n-step double-Q critic,
//! deterministic actor trained by Q-maximization, and clipped-Gaussian
//! exploration with a linearly decayed sigma.
//!
//! The division of labor around the encoder is deliberate: critic gradients
//! flow into it (configurable), actor gradients never do, and the momentum
//! copies are only ever moved by EMA.

use crate::autodiff::{NodeId, ParamSet, Tape};
use crate::error::{Error, Result};
use crate::math::{Mat, Real};
use crate::networks::{self, Heads};
use crate::replay::SegmentBatch;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// Clip bound for the smoothing noise added to bootstrap / actor actions.
pub const POLICY_NOISE_CLIP: f64 = 0.3;

/// Linearly decayed exploration stddev, written `Linear(start, end, k)`
/// with `k` in thousands of environment steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplorationSchedule {
    pub sigma_start: f64,
    pub sigma_end: f64,
    /// Decay duration in environment steps (already scaled from thousands).
    pub duration_steps: u64,
    /// Elementwise bound on the sampled noise.
    pub clip: f64,
}

impl Default for ExplorationSchedule {
    fn default() -> Self {
        ExplorationSchedule {
            sigma_start: 1.0,
            sigma_end: 0.1,
            duration_steps: 50_000,
            clip: POLICY_NOISE_CLIP,
        }
    }
}

impl ExplorationSchedule {
    /// Parse `Linear(1.0, 0.1, 50)`; the third argument is thousands of steps.
    pub fn parse(s: &str) -> Result<ExplorationSchedule> {
        let body = s
            .trim()
            .strip_prefix("Linear(")
            .and_then(|rest| rest.strip_suffix(')'))
            .ok_or_else(|| {
                Error::config(format!("bad schedule {s:?}; expected Linear(start, end, k_steps)"))
            })?;
        let parts: Vec<&str> = body.split(',').map(str::trim).collect();
        if parts.len() != 3 {
            return Err(Error::config(format!(
                "bad schedule {s:?}; expected exactly three arguments"
            )));
        }
        let num = |p: &str| -> Result<f64> {
            p.parse::<f64>()
                .map_err(|_| Error::config(format!("bad schedule number {p:?} in {s:?}")))
        };
        let sched = ExplorationSchedule {
            sigma_start: num(parts[0])?,
            sigma_end: num(parts[1])?,
            duration_steps: (num(parts[2])? * 1000.0).round() as u64,
            clip: POLICY_NOISE_CLIP,
        };
        sched.validate()?;
        Ok(sched)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_start >= self.sigma_end && self.sigma_end > 0.0) {
            return Err(Error::config("schedule needs sigma_start >= sigma_end > 0"));
        }
        if self.duration_steps == 0 {
            return Err(Error::config("schedule duration must be positive"));
        }
        if self.clip <= 0.0 {
            return Err(Error::config("noise clip must be positive"));
        }
        Ok(())
    }

    /// Stddev at an environment step: linear from start to end, then flat.
    pub fn sigma_at(&self, env_step: u64) -> f64 {
        if env_step >= self.duration_steps {
            return self.sigma_end;
        }
        let frac = env_step as f64 / self.duration_steps as f64;
        self.sigma_start + frac * (self.sigma_end - self.sigma_start)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TdConfig {
    pub gamma: f64,
    pub nstep: usize,
    pub critic_lr: f64,
    pub actor_lr: f64,
    /// Whether critic gradients also update the online encoder.
    pub critic_updates_encoder: bool,
}

impl Default for TdConfig {
    fn default() -> Self {
        TdConfig {
            gamma: 0.99,
            nstep: 3,
            critic_lr: 3e-4,
            actor_lr: 3e-4,
            critic_updates_encoder: true,
        }
    }
}

impl TdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::config("discount must be in (0, 1)"));
        }
        if self.nstep < 1 {
            return Err(Error::config("n-step must be >= 1"));
        }
        if self.critic_lr <= 0.0 || self.actor_lr <= 0.0 {
            return Err(Error::config("learning rates must be positive"));
        }
        Ok(())
    }
}

/// Sample an [rows, cols] matrix of N(0, sigma^2) noise clipped to
/// [-clip, clip]. Draws are row-major, in f64, for cross-precision parity.
pub fn clipped_noise<F: Real>(
    rows: usize,
    cols: usize,
    sigma: f64,
    clip: f64,
    rng: &mut ChaCha8Rng,
) -> Mat<F> {
    let mut m = Mat::zeros(rows, cols);
    for v in m.as_mut_slice() {
        let eps: f64 = StandardNormal.sample(rng);
        *v = F::from_f64((eps * sigma).clamp(-clip, clip));
    }
    m
}

/// Behavior policy: tanh policy mean plus clipped Gaussian noise, clamped
/// into the action box.
pub fn explore_action<F: Real>(
    pset: &ParamSet<F>,
    heads: &Heads,
    obs: &[f64],
    sigma: f64,
    clip: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    let o = Mat::from_f64s(1, obs.len(), obs);
    let z = heads.encode(pset, &o)?;
    let mean = heads.policy_mean(pset, &z)?;
    let noise = clipped_noise::<F>(1, heads.act_dim, sigma, clip, rng);
    Ok(mean
        .as_slice()
        .iter()
        .zip(noise.as_slice())
        .map(|(&m, &n)| (m.to_f64() + n.to_f64()).clamp(-1.0, 1.0))
        .collect())
}

/// n-step double-Q bootstrap target, one scalar per batch row. Everything
/// here is forward-only data: the critic loss treats y as a constant.
///
/// y = sum_{h<n} gamma^h r_{t+h}
///   + gamma^n min_k q_k_target(z_{t+n}, pi(z_{t+n}) + noise)
pub fn nstep_target<F: Real>(
    pset: &ParamSet<F>,
    heads: &Heads,
    seg: &SegmentBatch<F>,
    cfg: &TdConfig,
    smooth_sigma: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Mat<F>> {
    let n = cfg.nstep;
    if seg.len() < n {
        return Err(Error::usage(format!(
            "n-step target needs a segment of >= {n} transitions, got {}",
            seg.len()
        )));
    }
    let batch = seg.batch();
    let obs_n = if seg.len() == n { &seg.next_obs } else { &seg.obs[n] };
    let z_n = heads.encode(pset, obs_n)?;
    let mut a_n = heads.policy_mean(pset, &z_n)?;
    let noise = clipped_noise::<F>(batch, heads.act_dim, smooth_sigma, POLICY_NOISE_CLIP, rng);
    for (a, eps) in a_n.as_mut_slice().iter_mut().zip(noise.as_slice()) {
        *a = F::from_f64((a.to_f64() + eps.to_f64()).clamp(-1.0, 1.0));
    }
    let (tq1, tq2) = heads.target_q_values(pset, &z_n, &a_n)?;

    let mut y = Mat::zeros(batch, 1);
    let gamma_n = cfg.gamma.powi(n as i32);
    for b in 0..batch {
        let mut acc = 0.0;
        for (h, rew) in seg.rew.iter().take(n).enumerate() {
            acc += cfg.gamma.powi(h as i32) * rew.get(b, 0).to_f64();
        }
        let boot = tq1.get(b, 0).to_f64().min(tq2.get(b, 0).to_f64());
        y.set(b, 0, F::from_f64(acc + gamma_n * boot));
    }
    Ok(y)
}

/// Critic loss left on a tape: MSE of both Q heads against the fixed target.
pub struct CriticNodes {
    pub loss: NodeId,
    pub q1: NodeId,
    pub q2: NodeId,
}

pub fn critic_loss_tape<F: Real>(
    tape: &mut Tape<F>,
    pset: &ParamSet<F>,
    heads: &Heads,
    obs: &Mat<F>,
    act: &Mat<F>,
    y: &Mat<F>,
    updates_encoder: bool,
) -> Result<CriticNodes> {
    let z = if updates_encoder {
        let o = tape.leaf(obs);
        heads.encoder.bind(tape, pset).apply(tape, o)?
    } else {
        let z = heads.encode(pset, obs)?;
        tape.leaf(&z)
    };
    let a = tape.leaf(act);
    let za = tape.concat_cols(z, a);
    let q1 = heads.q1.bind(tape, pset).apply(tape, za)?;
    let q2 = heads.q2.bind(tape, pset).apply(tape, za)?;
    let target = tape.leaf(y);
    let mut loss = None;
    for q in [q1, q2] {
        let d = tape.sub(q, target);
        let sq = tape.mul(d, d);
        let mse = tape.mean_all(sq);
        loss = Some(match loss {
            Some(acc) => tape.add(acc, mse),
            None => mse,
        });
    }
    Ok(CriticNodes {
        loss: loss.expect("two heads"),
        q1,
        q2,
    })
}

#[derive(Clone, Copy, Debug, Default)]
pub struct CriticStats {
    pub loss: f64,
    /// Mean online Q value over both heads and the batch.
    pub q_mean: f64,
}

/// One critic update: build the n-step target, regress both Q heads on it,
/// Adam on q1/q2 (and the encoder when configured), then EMA the momentum
/// Q copies.
pub fn critic_update<F: Real>(
    pset: &mut ParamSet<F>,
    heads: &Heads,
    seg: &SegmentBatch<F>,
    cfg: &TdConfig,
    smooth_sigma: f64,
    tau: f64,
    rng: &mut ChaCha8Rng,
) -> Result<CriticStats> {
    cfg.validate()?;
    let y = nstep_target(pset, heads, seg, cfg, smooth_sigma, rng)?;
    let mut tape = Tape::new();
    let nodes = critic_loss_tape(
        &mut tape,
        pset,
        heads,
        &seg.obs[0],
        &seg.act[0],
        &y,
        cfg.critic_updates_encoder,
    )?;
    pset.zero_grads();
    tape.backward(nodes.loss, pset)?;
    let updates_encoder = cfg.critic_updates_encoder;
    pset.adam_step(cfg.critic_lr, |p| {
        !networks::is_target_path(p)
            && (p.starts_with("q1.")
                || p.starts_with("q2.")
                || (updates_encoder && p.starts_with("encoder.")))
    });
    pset.ema_to_target("q1.", "target.q1.", tau)?;
    pset.ema_to_target("q2.", "target.q2.", tau)?;

    let q_sum: f64 = tape
        .value(nodes.q1)
        .iter()
        .chain(tape.value(nodes.q2))
        .map(|v| v.to_f64())
        .sum();
    Ok(CriticStats {
        loss: tape.scalar(nodes.loss),
        q_mean: q_sum / (2 * seg.batch()) as f64,
    })
}

/// Actor loss on a tape: -mean(min_k q_k(z, pi(z) + noise)) with z and the
/// noise entering as constants. `q_fn` maps the perturbed action node to a
/// per-row value column; the real double-Q closure lives in [`actor_update`].
pub fn actor_loss_tape<F: Real>(
    tape: &mut Tape<F>,
    pset: &ParamSet<F>,
    heads: &Heads,
    z: &Mat<F>,
    noise: &Mat<F>,
    q_fn: impl FnOnce(&mut Tape<F>, &ParamSet<F>, NodeId, NodeId) -> Result<NodeId>,
) -> Result<NodeId> {
    let z_node = tape.leaf(z);
    let mean = heads.policy.bind(tape, pset).apply(tape, z_node)?;
    let eps = tape.leaf(noise);
    let perturbed = tape.add(mean, eps);
    let a = tape.clamp(perturbed, F::from_f64(-1.0), F::ONE);
    let q = q_fn(tape, pset, z_node, a)?;
    let mean_q = tape.mean_all(q);
    Ok(tape.neg(mean_q))
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ActorStats {
    pub loss: f64,
}

/// One actor update against an arbitrary taped Q (tests inject stubs here).
pub fn actor_update_with_q<F: Real>(
    pset: &mut ParamSet<F>,
    heads: &Heads,
    obs: &Mat<F>,
    lr: f64,
    smooth_sigma: f64,
    rng: &mut ChaCha8Rng,
    q_fn: impl FnOnce(&mut Tape<F>, &ParamSet<F>, NodeId, NodeId) -> Result<NodeId>,
) -> Result<ActorStats> {
    let z = heads.encode(pset, obs)?;
    let noise = clipped_noise::<F>(obs.rows(), heads.act_dim, smooth_sigma, POLICY_NOISE_CLIP, rng);
    let mut tape = Tape::new();
    let loss = actor_loss_tape(&mut tape, pset, heads, &z, &noise, q_fn)?;
    pset.zero_grads();
    tape.backward(loss, pset)?;
    pset.adam_step(lr, |p| p.starts_with("policy."));
    Ok(ActorStats {
        loss: tape.scalar(loss),
    })
}

/// One actor update: ascend min(q1, q2); only the policy parameters move.
pub fn actor_update<F: Real>(
    pset: &mut ParamSet<F>,
    heads: &Heads,
    obs: &Mat<F>,
    lr: f64,
    smooth_sigma: f64,
    rng: &mut ChaCha8Rng,
) -> Result<ActorStats> {
    actor_update_with_q(pset, heads, obs, lr, smooth_sigma, rng, |tape, pset, z, a| {
        let za = tape.concat_cols(z, a);
        let q1 = heads.q1.bind(tape, pset).apply(tape, za)?;
        let q2 = heads.q2.bind(tape, pset).apply(tape, za)?;
        Ok(tape.min_elem(q1, q2))
    })
}
