//! The model heads: encoder, latent dynamics (next-latent + reward from one
//! trunk), double Q, policy, and momentum copies of the encoder and Q heads.
//!
//! Everything lives in one [`ParamSet`] under fixed path prefixes, so
//! optimizer steps select online networks by prefix and the momentum copies
//! (under "target.") can never be stepped. Momentum copies start as exact
//! copies of their online counterparts and track them by EMA.

use crate::autodiff::{init_mlp, Mlp, MlpSpec, OutAct, ParamSet};
use crate::error::Result;
use crate::math::{Mat, Real};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const ENCODER: &str = "encoder";
pub const TARGET_ENCODER: &str = "target.encoder";
pub const DYNAMICS: &str = "dynamics";
pub const Q1: &str = "q1";
pub const Q2: &str = "q2";
pub const TARGET_Q1: &str = "target.q1";
pub const TARGET_Q2: &str = "target.q2";
pub const POLICY: &str = "policy";

/// Network sizing knobs shared by all heads.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct NetSizes {
    pub latent_dim: usize,
    pub hidden: Vec<usize>,
}

impl Default for NetSizes {
    fn default() -> Self {
        NetSizes {
            latent_dim: 50,
            hidden: vec![256, 256],
        }
    }
}

pub struct Heads {
    pub obs_dim: usize,
    pub act_dim: usize,
    pub latent_dim: usize,
    pub encoder: Mlp,
    pub target_encoder: Mlp,
    pub dynamics: Mlp,
    pub q1: Mlp,
    pub q2: Mlp,
    pub target_q1: Mlp,
    pub target_q2: Mlp,
    pub policy: Mlp,
}

/// Register all heads in `pset` and copy online weights into the momentum
/// copies, so `encode_target == encode` on a fresh model.
pub fn init_heads<F: Real>(
    pset: &mut ParamSet<F>,
    obs_dim: usize,
    act_dim: usize,
    sizes: &NetSizes,
    rng: &mut ChaCha8Rng,
) -> Result<Heads> {
    let l = sizes.latent_dim;
    let h = &sizes.hidden;
    let enc_spec = MlpSpec::new(obs_dim, h, l, OutAct::Linear);
    let dyn_spec = MlpSpec::new(l + act_dim, h, l + 1, OutAct::Linear);
    let q_spec = MlpSpec::new(l + act_dim, h, 1, OutAct::Linear);
    let pi_spec = MlpSpec::new(l, h, act_dim, OutAct::Tanh);

    let encoder = init_mlp(pset, ENCODER, &enc_spec, rng)?;
    let dynamics = init_mlp(pset, DYNAMICS, &dyn_spec, rng)?;
    let q1 = init_mlp(pset, Q1, &q_spec, rng)?;
    let q2 = init_mlp(pset, Q2, &q_spec, rng)?;
    let policy = init_mlp(pset, POLICY, &pi_spec, rng)?;
    let target_encoder = init_mlp(pset, TARGET_ENCODER, &enc_spec, rng)?;
    let target_q1 = init_mlp(pset, TARGET_Q1, &q_spec, rng)?;
    let target_q2 = init_mlp(pset, TARGET_Q2, &q_spec, rng)?;
    pset.copy_to_target(&format!("{ENCODER}."), &format!("{TARGET_ENCODER}."))?;
    pset.copy_to_target(&format!("{Q1}."), &format!("{TARGET_Q1}."))?;
    pset.copy_to_target(&format!("{Q2}."), &format!("{TARGET_Q2}."))?;

    Ok(Heads {
        obs_dim,
        act_dim,
        latent_dim: l,
        encoder,
        target_encoder,
        dynamics,
        q1,
        q2,
        target_q1,
        target_q2,
        policy,
    })
}

impl Heads {
    /// Re-resolve all parameter ids after a ParamSet was rebuilt (load paths).
    pub fn rebind<F: Real>(&mut self, pset: &ParamSet<F>) -> Result<()> {
        self.encoder.rebind(pset)?;
        self.target_encoder.rebind(pset)?;
        self.dynamics.rebind(pset)?;
        self.q1.rebind(pset)?;
        self.q2.rebind(pset)?;
        self.target_q1.rebind(pset)?;
        self.target_q2.rebind(pset)?;
        self.policy.rebind(pset)
    }

    /// z = e_theta(o), batched rows.
    pub fn encode<F: Real>(&self, pset: &ParamSet<F>, obs: &Mat<F>) -> Result<Mat<F>> {
        self.encoder.eval(pset, obs)
    }

    /// Momentum-encoder embedding. Inference-only by construction: the taped
    /// losses only ever consume its output as a constant.
    pub fn encode_target<F: Real>(&self, pset: &ParamSet<F>, obs: &Mat<F>) -> Result<Mat<F>> {
        self.target_encoder.eval(pset, obs)
    }

    /// (z_next, r_hat) = d_phi(z, a): shared trunk, output split into the
    /// next latent (first latent_dim columns) and reward (last column).
    pub fn dynamics_step<F: Real>(
        &self,
        pset: &ParamSet<F>,
        z: &Mat<F>,
        a: &Mat<F>,
    ) -> Result<(Mat<F>, Mat<F>)> {
        let out = self.dynamics.eval(pset, &z.concat_cols(a))?;
        let z_next = out.slice_cols(0, self.latent_dim);
        let r_hat = out.slice_cols(self.latent_dim, 1);
        Ok((z_next, r_hat))
    }

    /// Two independent scalar estimates from concatenated (z, a).
    pub fn q_values<F: Real>(
        &self,
        pset: &ParamSet<F>,
        z: &Mat<F>,
        a: &Mat<F>,
    ) -> Result<(Mat<F>, Mat<F>)> {
        let za = z.concat_cols(a);
        Ok((self.q1.eval(pset, &za)?, self.q2.eval(pset, &za)?))
    }

    pub fn target_q_values<F: Real>(
        &self,
        pset: &ParamSet<F>,
        z: &Mat<F>,
        a: &Mat<F>,
    ) -> Result<(Mat<F>, Mat<F>)> {
        let za = z.concat_cols(a);
        Ok((self.target_q1.eval(pset, &za)?, self.target_q2.eval(pset, &za)?))
    }

    /// Deterministic tanh-squashed action in [-1, 1]^act_dim.
    pub fn policy_mean<F: Real>(&self, pset: &ParamSet<F>, z: &Mat<F>) -> Result<Mat<F>> {
        self.policy.eval(pset, z)
    }
}

/// One EMA step for every momentum copy:
/// target <- (1 - tau) * target + tau * online.
pub fn ema_update<F: Real>(pset: &mut ParamSet<F>, tau: f64) -> Result<()> {
    pset.ema_to_target(&format!("{ENCODER}."), &format!("{TARGET_ENCODER}."), tau)?;
    pset.ema_to_target(&format!("{Q1}."), &format!("{TARGET_Q1}."), tau)?;
    pset.ema_to_target(&format!("{Q2}."), &format!("{TARGET_Q2}."), tau)
}

/// True if a parameter path belongs to a momentum copy (never optimized).
pub fn is_target_path(name: &str) -> bool {
    name.starts_with("target.")
}

/// Sum of Adam step counters across momentum copies; must stay 0 forever.
pub fn target_adam_steps<F: Real>(pset: &ParamSet<F>) -> u64 {
    pset.ids_with_prefix("target.")
        .into_iter()
        .map(|id| pset.adam_t(id))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rngs::substream;
    use approx::assert_relative_eq;
    use rand::Rng;

    fn small_heads() -> (ParamSet<f64>, Heads) {
        let mut pset = ParamSet::new();
        let sizes = NetSizes {
            latent_dim: 4,
            hidden: vec![6, 5],
        };
        let mut rng = substream(42, "nets");
        let heads = init_heads(&mut pset, 3, 2, &sizes, &mut rng).unwrap();
        (pset, heads)
    }

    fn zero_prefix(pset: &mut ParamSet<f64>, prefix: &str) {
        for id in pset.ids_with_prefix(prefix) {
            pset.value_mut(id).fill(0.0);
        }
    }

    /// Independent forward pass: plain nested loops, no Mat/Mlp machinery.
    fn naive_forward(pset: &ParamSet<f64>, prefix: &str, n_layers: usize, x: &[f64], tanh_out: bool) -> Vec<f64> {
        let mut cur = x.to_vec();
        for li in 0..n_layers {
            let w_id = pset.id(&format!("{prefix}.l{li}.w")).unwrap();
            let b_id = pset.id(&format!("{prefix}.l{li}.b")).unwrap();
            let (fan_in, fan_out) = pset.shape(w_id);
            assert_eq!(cur.len(), fan_in);
            let w = pset.value(w_id);
            let b = pset.value(b_id);
            let mut next = vec![0.0; fan_out];
            for (j, nx) in next.iter_mut().enumerate() {
                let mut acc = b[j];
                for (i, &xi) in cur.iter().enumerate() {
                    acc += xi * w[i * fan_out + j];
                }
                *nx = acc;
            }
            if li + 1 < n_layers {
                for v in &mut next {
                    *v = if *v > 0.0 { *v } else { v.exp() - 1.0 };
                }
            } else if tanh_out {
                for v in &mut next {
                    *v = v.tanh();
                }
            }
            cur = next;
        }
        cur
    }

    #[test]
    fn zero_encoder_maps_to_zero_latent() {
        let (mut pset, heads) = small_heads();
        zero_prefix(&mut pset, "encoder.");
        let z = heads.encode(&pset, &Mat::from_f64s(2, 3, &[1.0, -2.0, 3.0, 0.5, 0.1, -0.7])).unwrap();
        assert!(z.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encode_is_pure_and_matches_oracle() {
        let (pset, heads) = small_heads();
        let o = [0.3, -1.2, 0.8];
        let z1 = heads.encode(&pset, &Mat::from_f64s(1, 3, &o)).unwrap();
        let z2 = heads.encode(&pset, &Mat::from_f64s(1, 3, &o)).unwrap();
        assert_eq!(z1.as_slice(), z2.as_slice());
        let oracle = naive_forward(&pset, "encoder", 3, &o, false);
        for (a, b) in z1.as_slice().iter().zip(&oracle) {
            assert_relative_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn fresh_target_encoder_equals_online() {
        let (pset, heads) = small_heads();
        let o = Mat::from_f64s(1, 3, &[0.9, 0.1, -0.4]);
        let z = heads.encode(&pset, &o).unwrap();
        let zt = heads.encode_target(&pset, &o).unwrap();
        assert_eq!(z.as_slice(), zt.as_slice());
    }

    #[test]
    fn target_diverges_after_online_moves() {
        let (mut pset, heads) = small_heads();
        // nudge the online encoder, EMA a little, outputs must now differ
        for id in pset.ids_with_prefix("encoder.") {
            for v in pset.value_mut(id) {
                *v += 0.1;
            }
        }
        ema_update(&mut pset, 0.005).unwrap();
        let o = Mat::from_f64s(1, 3, &[0.9, 0.1, -0.4]);
        let z = heads.encode(&pset, &o).unwrap();
        let zt = heads.encode_target(&pset, &o).unwrap();
        assert_ne!(z.as_slice(), zt.as_slice());
    }

    #[test]
    fn dynamics_zero_params_and_split() {
        let (mut pset, heads) = small_heads();
        zero_prefix(&mut pset, "dynamics.");
        let z = Mat::from_f64s(1, 4, &[0.1, 0.2, 0.3, 0.4]);
        let a = Mat::from_f64s(1, 2, &[0.5, -0.5]);
        let (zn, r) = heads.dynamics_step(&pset, &z, &a).unwrap();
        assert_eq!(zn.as_slice(), &[0.0; 4]);
        assert_eq!(r.as_slice(), &[0.0]);
        assert_eq!(zn.cols(), 4);
        assert_eq!(r.cols(), 1);
    }

    #[test]
    fn dynamics_matches_oracle() {
        let (pset, heads) = small_heads();
        let z = [0.1, -0.2, 0.3, 0.4];
        let a = [0.5, -0.6];
        let input: Vec<f64> = z.iter().chain(a.iter()).copied().collect();
        let oracle = naive_forward(&pset, "dynamics", 3, &input, false);
        let (zn, r) = heads
            .dynamics_step(&pset, &Mat::from_f64s(1, 4, &z), &Mat::from_f64s(1, 2, &a))
            .unwrap();
        for (x, y) in zn.as_slice().iter().zip(&oracle[..4]) {
            assert_relative_eq!(x, y, epsilon = 1e-12);
        }
        assert_relative_eq!(r.get(0, 0), oracle[4], epsilon = 1e-12);
    }

    #[test]
    fn q_values_zero_params_and_oracle() {
        let (mut pset, heads) = small_heads();
        let z = Mat::from_f64s(1, 4, &[1.0, 1.0, 1.0, 1.0]);
        let a = Mat::from_f64s(1, 2, &[0.2, 0.8]);
        let (q1, q2) = heads.q_values(&pset, &z, &a).unwrap();
        let input: Vec<f64> = z.as_slice().iter().chain(a.as_slice()).copied().collect();
        assert_relative_eq!(q1.get(0, 0), naive_forward(&pset, "q1", 3, &input, false)[0], epsilon = 1e-12);
        assert_relative_eq!(q2.get(0, 0), naive_forward(&pset, "q2", 3, &input, false)[0], epsilon = 1e-12);
        zero_prefix(&mut pset, "q1.");
        zero_prefix(&mut pset, "q2.");
        let (q1, q2) = heads.q_values(&pset, &z, &a).unwrap();
        assert_eq!((q1.get(0, 0), q2.get(0, 0)), (0.0, 0.0));
    }

    #[test]
    fn policy_zero_params_and_bounds() {
        let (mut pset, heads) = small_heads();
        let mut rng = substream(1, "obs");
        for _ in 0..50 {
            let z: Vec<f64> = (0..4).map(|_| rng.random_range(-3.0..3.0)).collect();
            let a = heads.policy_mean(&pset, &Mat::from_f64s(1, 4, &z)).unwrap();
            assert!(a.as_slice().iter().all(|v| v.abs() <= 1.0), "policy out of bounds");
        }
        zero_prefix(&mut pset, "policy.");
        let a = heads.policy_mean(&pset, &Mat::from_f64s(1, 4, &[1.0, 2.0, 3.0, 4.0])).unwrap();
        assert_eq!(a.as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn ema_update_touches_all_momentum_copies_and_contracts() {
        let (mut pset, _heads) = small_heads();
        // freeze online; move targets away by a known gap
        for prefix in ["target.encoder.", "target.q1.", "target.q2."] {
            for id in pset.ids_with_prefix(prefix) {
                for v in pset.value_mut(id) {
                    *v += 1.0;
                }
            }
        }
        let tau = 0.005;
        let gap_before: f64 = 1.0;
        ema_update(&mut pset, tau).unwrap();
        for prefix in ["target.encoder.", "target.q1.", "target.q2."] {
            for id in pset.ids_with_prefix(prefix) {
                let online_name = pset.name(id).trim_start_matches("target.").to_string();
                let online = pset.id(&online_name).unwrap();
                for (t, o) in pset.value(id).iter().zip(pset.value(online)) {
                    let gap = (t - o).abs();
                    assert_relative_eq!(gap, gap_before * (1.0 - tau), epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn momentum_copies_never_stepped_by_standard_filters() {
        let (mut pset, _heads) = small_heads();
        // put gradients everywhere, then run every optimizer filter the
        // trainers use; target step counts must remain zero
        let n = pset.len();
        for id in 0..n {
            let g = vec![1.0; pset.value(id).len()];
            pset.accum_grad(id, &g);
        }
        pset.adam_step(1e-3, |p| {
            !is_target_path(p) && (p.starts_with("encoder.") || p.starts_with("dynamics."))
        });
        pset.adam_step(1e-3, |p| !is_target_path(p) && (p.starts_with("q1.") || p.starts_with("q2.")));
        pset.adam_step(1e-3, |p| p.starts_with("policy."));
        assert_eq!(target_adam_steps(&pset), 0);
        // and the online ones did move
        assert!(pset.adam_t(pset.id("encoder.l0.w").unwrap()) > 0);
    }
}
