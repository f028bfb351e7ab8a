//! Episode-aware uniform replay buffer.
//!
//! Transitions are appended to the current episode; `done` closes it.
//! Sampling draws fixed-length contiguous segments that never cross episode
//! boundaries, uniformly over all valid (episode, start) pairs. A segment of
//! length S carries S transitions plus the observation after the last one,
//! which is how one sampler serves the multi-step model loss (length H+1),
//! the n-step critic (length n, bootstrapping on `next_obs`) and one-step
//! ensemble training (length 1).
//!
//! Capacity is unlimited by default; when a cap is set, the oldest closed
//! episodes are evicted whole.

use crate::error::{Error, Result};
use crate::math::{Mat, Real};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};

struct EpisodeStore<F> {
    /// Rows 0..=T: observation of each transition plus the final next_obs.
    obs: Vec<F>,
    act: Vec<F>,
    rew: Vec<F>,
    done: bool,
}

impl<F: Real> EpisodeStore<F> {
    fn new() -> Self {
        EpisodeStore {
            obs: Vec::new(),
            act: Vec::new(),
            rew: Vec::new(),
            done: false,
        }
    }

    fn transitions(&self) -> usize {
        self.rew.len()
    }
}

pub struct ReplayBuffer<F: Real> {
    obs_dim: usize,
    act_dim: usize,
    capacity: Option<usize>,
    closed: Vec<EpisodeStore<F>>,
    open: EpisodeStore<F>,
    total: usize,
}

/// A batch of equal-length segments, laid out per time offset: `obs[h]`,
/// `act[h]`, `rew[h]` are `[B, dim]` matrices for offset h within the
/// segment, and `next_obs` is the bootstrap observation after the final
/// transition of each segment.
pub struct SegmentBatch<F: Real> {
    pub obs: Vec<Mat<F>>,
    pub act: Vec<Mat<F>>,
    pub rew: Vec<Mat<F>>,
    pub next_obs: Mat<F>,
}

impl<F: Real> SegmentBatch<F> {
    pub fn len(&self) -> usize {
        self.act.len()
    }

    pub fn is_empty(&self) -> bool {
        self.act.is_empty()
    }

    pub fn batch(&self) -> usize {
        self.next_obs.rows()
    }
}

impl<F: Real> ReplayBuffer<F> {
    pub fn new(obs_dim: usize, act_dim: usize, capacity: Option<usize>) -> Self {
        ReplayBuffer {
            obs_dim,
            act_dim,
            capacity,
            closed: Vec::new(),
            open: EpisodeStore::new(),
            total: 0,
        }
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn act_dim(&self) -> usize {
        self.act_dim
    }

    pub fn total_transitions(&self) -> usize {
        self.total
    }

    /// Closed episodes plus the open one if it has any transitions.
    pub fn episode_count(&self) -> usize {
        self.closed.len() + usize::from(self.open.transitions() > 0)
    }

    pub fn push(&mut self, obs: &[F], act: &[F], rew: F, next_obs: &[F], done: bool) {
        assert_eq!(obs.len(), self.obs_dim, "push obs dim");
        assert_eq!(next_obs.len(), self.obs_dim, "push next_obs dim");
        assert_eq!(act.len(), self.act_dim, "push act dim");
        if self.open.transitions() == 0 {
            self.open.obs.clear();
            self.open.obs.extend_from_slice(obs);
        } else {
            // continuity within an episode: this obs is the previous next_obs
            debug_assert!({
                let prev = &self.open.obs[self.open.obs.len() - self.obs_dim..];
                prev.iter().zip(obs).all(|(a, b)| a.to_f64() == b.to_f64())
            });
        }
        self.open.obs.extend_from_slice(next_obs);
        self.open.act.extend_from_slice(act);
        self.open.rew.push(rew);
        self.open.done = done;
        self.total += 1;
        if done {
            let finished = std::mem::replace(&mut self.open, EpisodeStore::new());
            self.closed.push(finished);
        }
        if let Some(cap) = self.capacity {
            while self.total > cap && !self.closed.is_empty() {
                let evicted = self.closed.remove(0);
                self.total -= evicted.transitions();
            }
        }
    }

    fn episode(&self, idx: usize) -> &EpisodeStore<F> {
        if idx < self.closed.len() {
            &self.closed[idx]
        } else {
            &self.open
        }
    }

    fn episode_list(&self) -> impl Iterator<Item = (usize, &EpisodeStore<F>)> {
        self.closed
            .iter()
            .enumerate()
            .chain((self.open.transitions() > 0).then_some((self.closed.len(), &self.open)))
    }

    /// Number of valid segment starts of the given length, over all episodes.
    pub fn valid_starts(&self, length: usize) -> usize {
        self.episode_list()
            .map(|(_, ep)| ep.transitions().saturating_sub(length - 1))
            .sum()
    }

    /// One uniform draw over valid (episode, start) pairs. Exposed for
    /// distribution diagnostics; `sample_segments` uses the same mechanism.
    pub fn sample_start(&self, length: usize, rng: &mut ChaCha8Rng) -> Option<(usize, usize)> {
        assert!(length >= 1, "segment length must be >= 1");
        let total = self.valid_starts(length);
        if total == 0 {
            return None;
        }
        let mut pick = rng.random_range(0..total);
        for (idx, ep) in self.episode_list() {
            let starts = ep.transitions().saturating_sub(length - 1);
            if pick < starts {
                return Some((idx, pick));
            }
            pick -= starts;
        }
        unreachable!("pick within total")
    }

    /// Sample `batch` segments of `length` transitions each.
    pub fn sample_segments(
        &self,
        batch: usize,
        length: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<SegmentBatch<F>> {
        if length == 0 || batch == 0 {
            return Err(Error::usage("sample_segments: batch and length must be >= 1"));
        }
        if self.valid_starts(length) == 0 {
            return Err(Error::NotReady(format!(
                "no stored episode has {length} transitions yet ({} transitions total)",
                self.total
            )));
        }
        let od = self.obs_dim;
        let ad = self.act_dim;
        let mut obs = vec![Mat::zeros(batch, od); length];
        let mut act = vec![Mat::zeros(batch, ad); length];
        let mut rew = vec![Mat::zeros(batch, 1); length];
        let mut next_obs = Mat::zeros(batch, od);
        for b in 0..batch {
            let (ep_idx, start) = self.sample_start(length, rng).expect("checked above");
            let ep = self.episode(ep_idx);
            for h in 0..length {
                let t = start + h;
                obs[h].row_mut(b).copy_from_slice(&ep.obs[t * od..(t + 1) * od]);
                act[h].row_mut(b).copy_from_slice(&ep.act[t * ad..(t + 1) * ad]);
                rew[h].set(b, 0, ep.rew[t]);
            }
            let t_next = start + length;
            next_obs
                .row_mut(b)
                .copy_from_slice(&ep.obs[t_next * od..(t_next + 1) * od]);
        }
        Ok(SegmentBatch {
            obs,
            act,
            rew,
            next_obs,
        })
    }

    // ---- persistence -----------------------------------------------------

    /// Trajectory JSONL dump: one row per transition plus a terminal row per
    /// episode carrying the final observation.
    pub fn dump_jsonl(&self, mut w: impl Write) -> Result<()> {
        for (episode, ep) in self.episode_list() {
            let od = self.obs_dim;
            let ad = self.act_dim;
            for t in 0..ep.transitions() {
                let row = TrajRow {
                    episode,
                    t,
                    obs: ep.obs[t * od..(t + 1) * od].iter().map(|v| v.to_f64()).collect(),
                    action: Some(ep.act[t * ad..(t + 1) * ad].iter().map(|v| v.to_f64()).collect()),
                    reward: Some(ep.rew[t].to_f64()),
                    done: Some(ep.done && t + 1 == ep.transitions()),
                };
                serde_json::to_writer(&mut w, &row)?;
                w.write_all(b"\n")?;
            }
            let t = ep.transitions();
            let terminal = TrajRow {
                episode,
                t,
                obs: ep.obs[t * od..(t + 1) * od].iter().map(|v| v.to_f64()).collect(),
                action: None,
                reward: None,
                done: None,
            };
            serde_json::to_writer(&mut w, &terminal)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn load_jsonl(
        r: impl BufRead,
        obs_dim: usize,
        act_dim: usize,
        capacity: Option<usize>,
    ) -> Result<ReplayBuffer<F>> {
        let mut buf = ReplayBuffer::new(obs_dim, act_dim, capacity);
        let mut pending: Option<TrajRow> = None;
        for line in r.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let row: TrajRow = serde_json::from_str(&line)?;
            if let Some(prev) = pending.take() {
                let (Some(action), Some(reward)) = (&prev.action, prev.reward) else {
                    // terminal observation row: next row starts a new episode
                    pending = Some(row);
                    continue;
                };
                let o: Vec<F> = prev.obs.iter().map(|&v| F::from_f64(v)).collect();
                let a: Vec<F> = action.iter().map(|&v| F::from_f64(v)).collect();
                let next: Vec<F> = row.obs.iter().map(|&v| F::from_f64(v)).collect();
                let done = prev.done.unwrap_or(false);
                buf.push(&o, &a, F::from_f64(reward), &next, done);
            }
            pending = Some(row);
        }
        Ok(buf)
    }

    /// Compact binary image for checkpoints (exact, including the open
    /// episode). Layout: a small JSON header with episode lengths followed by
    /// packed little-endian arrays in episode order.
    pub fn write_binary(&self, out: &mut Vec<u8>) {
        let mut payload = Vec::new();
        let mut metas = Vec::new();
        for (_, ep) in self.episode_list() {
            F::write_le(&ep.obs, &mut payload);
            F::write_le(&ep.act, &mut payload);
            F::write_le(&ep.rew, &mut payload);
            metas.push((ep.transitions(), ep.done));
        }
        let header = ReplayHeader {
            obs_dim: self.obs_dim,
            act_dim: self.act_dim,
            capacity: self.capacity,
            episodes: metas,
        };
        let hbytes = serde_json::to_vec(&header).expect("replay header");
        out.extend_from_slice(&(hbytes.len() as u64).to_le_bytes());
        out.extend_from_slice(&hbytes);
        out.extend_from_slice(&payload);
    }

    pub fn read_binary(bytes: &[u8]) -> Result<ReplayBuffer<F>> {
        if bytes.len() < 8 {
            return Err(Error::Corrupt("replay blob too short".into()));
        }
        let hlen = u64::from_le_bytes(bytes[0..8].try_into().unwrap()) as usize;
        if bytes.len() < 8 + hlen {
            return Err(Error::Corrupt("replay header truncated".into()));
        }
        let header: ReplayHeader = serde_json::from_slice(&bytes[8..8 + hlen])?;
        let width = std::mem::size_of::<F>();
        let mut off = 8 + hlen;
        let mut take = |n: usize| -> Result<Vec<F>> {
            let end = off + n * width;
            if end > bytes.len() {
                return Err(Error::Corrupt("replay payload truncated".into()));
            }
            let vals = F::read_le(&bytes[off..end])
                .ok_or_else(|| Error::Corrupt("replay payload misaligned".into()))?;
            off = end;
            Ok(vals)
        };
        let mut buf = ReplayBuffer::new(header.obs_dim, header.act_dim, header.capacity);
        for &(t, done) in &header.episodes {
            let ep = EpisodeStore {
                obs: take((t + 1) * header.obs_dim)?,
                act: take(t * header.act_dim)?,
                rew: take(t)?,
                done,
            };
            buf.total += t;
            if done {
                buf.closed.push(ep);
            } else {
                buf.open = ep;
            }
        }
        Ok(buf)
    }
}

#[derive(Serialize, Deserialize)]
struct ReplayHeader {
    obs_dim: usize,
    act_dim: usize,
    capacity: Option<usize>,
    episodes: Vec<(usize, bool)>,
}

/// Trajectory JSONL row. Terminal rows carry only the final observation.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrajRow {
    pub episode: usize,
    pub t: usize,
    pub obs: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub action: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reward: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub done: Option<bool>,
}
