//! Binary checkpoints: full training state (parameters + optimizer moments,
//! replay, env snapshot, RNG stream positions, schedule counters) so a run
//! can resume bitwise. Checkpoints are only ever written between episodes,
//! which keeps per-episode scratch (current return, warm-started plan) out of
//! the format.
//!
//! Layout: 8-byte magic, u32 version, then three length-prefixed sections —
//! JSON metadata, parameter bytes, replay bytes. All integers little-endian.

use crate::config::RunConfig;
use crate::envs::{EnvSnapshot, EnvState};
use crate::error::{Error, Result};
use crate::harness::{TrainState, RNG_STREAMS};
use crate::replay::ReplayBuffer;
use crate::rngs;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

pub const CKPT_MAGIC: [u8; 8] = *b"TCRLCKP\0";
pub const CKPT_VERSION: u32 = 1;

/// Everything outside the two bulk sections. RNG positions are u128 word
/// offsets stored as decimal strings (JSON numbers stop at u64).
#[derive(Serialize, Deserialize)]
struct Meta {
    cfg: RunConfig,
    env_step: u64,
    episode: u64,
    update_rounds: u64,
    steps_since_update: u64,
    eval_round: u64,
    next_eval: u64,
    next_ckpt: Option<u64>,
    stop: bool,
    env: EnvSnapshot,
    normalizer: Option<crate::baselines::RunningNormalizer>,
    rng_pos: BTreeMap<String, String>,
}

pub fn save(path: &Path, state: &TrainState) -> Result<()> {
    let mut rng_pos = BTreeMap::new();
    for name in RNG_STREAMS {
        let pos = match name {
            "seedact" => rngs::save_pos(&state.rngs.seedact),
            "explore" => rngs::save_pos(&state.rngs.explore),
            "replay" => rngs::save_pos(&state.rngs.replay),
            "smooth" => rngs::save_pos(&state.rngs.smooth),
            "boot" => rngs::save_pos(&state.rngs.boot),
            "plan" => rngs::save_pos(&state.rngs.plan),
            other => unreachable!("unknown rng stream {other}"),
        };
        rng_pos.insert(name.to_string(), pos.to_string());
    }
    let meta = Meta {
        cfg: state.cfg.clone(),
        env_step: state.env_step,
        episode: state.episode,
        update_rounds: state.update_rounds,
        steps_since_update: state.steps_since_update,
        eval_round: state.eval_round,
        next_eval: state.next_eval,
        next_ckpt: state.next_ckpt,
        stop: state.stop,
        env: state.env.snapshot(),
        normalizer: state.normalizer.clone(),
        rng_pos,
    };
    let meta_bytes = serde_json::to_vec(&meta)?;
    let param_bytes = state.pset.to_bytes();
    let mut replay_bytes = Vec::new();
    state.replay.write_binary(&mut replay_bytes);

    let mut out = Vec::with_capacity(
        CKPT_MAGIC.len() + 4 + 24 + meta_bytes.len() + param_bytes.len() + replay_bytes.len(),
    );
    out.extend_from_slice(&CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    for section in [&meta_bytes, &param_bytes, &replay_bytes] {
        out.extend_from_slice(&(section.len() as u64).to_le_bytes());
        out.extend_from_slice(section);
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn take<'a>(bytes: &mut &'a [u8], n: usize, what: &str) -> Result<&'a [u8]> {
    if bytes.len() < n {
        return Err(Error::Corrupt(format!(
            "checkpoint truncated reading {what}: need {n} bytes, have {}",
            bytes.len()
        )));
    }
    let (head, tail) = bytes.split_at(n);
    *bytes = tail;
    Ok(head)
}

fn take_u64(bytes: &mut &[u8], what: &str) -> Result<u64> {
    let raw = take(bytes, 8, what)?;
    Ok(u64::from_le_bytes(raw.try_into().unwrap()))
}

pub fn load(path: &Path) -> Result<TrainState> {
    let all = std::fs::read(path)?;
    let mut bytes = all.as_slice();

    let magic = take(&mut bytes, 8, "magic")?;
    if magic != CKPT_MAGIC {
        return Err(Error::Corrupt("not a checkpoint file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(take(&mut bytes, 4, "version")?.try_into().unwrap());
    if version != CKPT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CKPT_VERSION,
        });
    }

    let meta_len = take_u64(&mut bytes, "meta length")? as usize;
    let meta: Meta = serde_json::from_slice(take(&mut bytes, meta_len, "meta")?)?;
    let param_len = take_u64(&mut bytes, "param length")? as usize;
    let param_bytes = take(&mut bytes, param_len, "params")?;
    let replay_len = take_u64(&mut bytes, "replay length")? as usize;
    let replay_bytes = take(&mut bytes, replay_len, "replay")?;

    // Rebuild the skeleton from the config (same init path as a fresh run),
    // then overwrite every piece of mutable state.
    let mut state = TrainState::new(meta.cfg)?;
    state.pset.load_from_bytes(param_bytes)?;
    state.replay = ReplayBuffer::read_binary(replay_bytes)?;
    state.env = EnvState::restore(&meta.env);
    state.normalizer = meta.normalizer;
    for name in RNG_STREAMS {
        let pos_str = meta.rng_pos.get(name).ok_or_else(|| {
            Error::Corrupt(format!("checkpoint missing rng stream position {name:?}"))
        })?;
        let pos: u128 = pos_str
            .parse()
            .map_err(|_| Error::Corrupt(format!("bad rng position for {name:?}: {pos_str:?}")))?;
        *state.rngs.by_name(name) = rngs::restore(state.cfg.seed, name, pos);
    }
    state.env_step = meta.env_step;
    state.episode = meta.episode;
    state.update_rounds = meta.update_rounds;
    state.steps_since_update = meta.steps_since_update;
    state.eval_round = meta.eval_round;
    state.next_eval = meta.next_eval;
    state.next_ckpt = meta.next_ckpt;
    state.stop = meta.stop;
    Ok(state)
}
