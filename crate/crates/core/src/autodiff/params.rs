//! Named parameter storage with Adam state, EMA blending between path
//! prefixes, MLP construction/evaluation, and a versioned binary format.
//!
//! All parameters of a model live in one [`ParamSet`] under dotted paths
//! ("encoder.l0.w", "target.q1.l2.b", ...). Optimizer steps and EMA updates
//! select parameters by path prefix, which is how online networks, momentum
//! copies and separately-optimized heads share one container.

use super::tape::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::math::{Dtype, Mat, Real};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Format version of the serialized parameter blob.
pub const PARAMS_FORMAT_VERSION: u32 = 1;

struct Entry<F> {
    name: String,
    rows: usize,
    cols: usize,
    value: Vec<F>,
    grad: Vec<F>,
    m: Vec<F>,
    v: Vec<F>,
    /// Number of Adam steps applied to this entry (drives bias correction).
    /// Stays 0 for parameters that are only ever EMA targets.
    t: u64,
}

pub struct ParamSet<F: Real> {
    entries: Vec<Entry<F>>,
    index: HashMap<String, usize>,
}

impl<F: Real> Default for ParamSet<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> ParamSet<F> {
    pub fn new() -> Self {
        ParamSet {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: &str, rows: usize, cols: usize, value: Vec<F>) -> Result<usize> {
        if self.index.contains_key(name) {
            return Err(Error::config(format!("duplicate parameter {name}")));
        }
        if value.len() != rows * cols {
            return Err(Error::shape(
                name,
                format!("{rows}x{cols} = {} values", rows * cols),
                format!("{} values", value.len()),
            ));
        }
        let n = value.len();
        self.entries.push(Entry {
            name: name.to_string(),
            rows,
            cols,
            value,
            grad: vec![F::ZERO; n],
            m: vec![F::ZERO; n],
            v: vec![F::ZERO; n],
            t: 0,
        });
        let id = self.entries.len() - 1;
        self.index.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.entries[id].name
    }

    pub fn shape(&self, id: usize) -> (usize, usize) {
        (self.entries[id].rows, self.entries[id].cols)
    }

    pub fn value(&self, id: usize) -> &[F] {
        &self.entries[id].value
    }

    pub fn value_mut(&mut self, id: usize) -> &mut [F] {
        &mut self.entries[id].value
    }

    pub fn grad(&self, id: usize) -> &[F] {
        &self.entries[id].grad
    }

    pub fn adam_t(&self, id: usize) -> u64 {
        self.entries[id].t
    }

    /// Ids whose path starts with `prefix`, in insertion order.
    pub fn ids_with_prefix(&self, prefix: &str) -> Vec<usize> {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.name.starts_with(prefix))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.fill(F::ZERO);
        }
    }

    pub fn accum_grad(&mut self, id: usize, g: &[F]) {
        let e = &mut self.entries[id];
        assert_eq!(g.len(), e.grad.len(), "grad size mismatch for {}", e.name);
        for (d, &s) in e.grad.iter_mut().zip(g) {
            *d += s;
        }
    }

    /// One Adam step over every parameter whose path passes `filter`.
    /// Bias-correction time advances per parameter, only when stepped.
    pub fn adam_step(&mut self, lr: f64, filter: impl Fn(&str) -> bool) {
        let b1 = F::from_f64(ADAM_BETA1);
        let b2 = F::from_f64(ADAM_BETA2);
        let eps = F::from_f64(ADAM_EPS);
        let lr = F::from_f64(lr);
        for e in &mut self.entries {
            if !filter(&e.name) {
                continue;
            }
            e.t += 1;
            let bc1 = F::ONE - F::from_f64(ADAM_BETA1.powi(e.t as i32));
            let bc2 = F::ONE - F::from_f64(ADAM_BETA2.powi(e.t as i32));
            for i in 0..e.value.len() {
                let g = e.grad[i];
                e.m[i] = b1 * e.m[i] + (F::ONE - b1) * g;
                e.v[i] = b2 * e.v[i] + (F::ONE - b2) * g * g;
                let m_hat = e.m[i] / bc1;
                let v_hat = e.v[i] / bc2;
                e.value[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }

    /// Soft-update every `target_prefix` parameter toward its `online_prefix`
    /// counterpart: target <- (1 - tau) * target + tau * online.
    pub fn ema_to_target(&mut self, online_prefix: &str, target_prefix: &str, tau: f64) -> Result<()> {
        let tau = F::from_f64(tau);
        let one_minus = F::ONE - tau;
        let pairs: Vec<(usize, usize)> = self
            .ids_with_prefix(online_prefix)
            .into_iter()
            .map(|src| {
                let suffix = &self.entries[src].name[online_prefix.len()..];
                let tname = format!("{target_prefix}{suffix}");
                let dst = self
                    .id(&tname)
                    .ok_or_else(|| Error::config(format!("EMA target {tname} missing")))?;
                if self.shape(src) != self.shape(dst) {
                    return Err(Error::shape(
                        tname,
                        format!("{:?}", self.shape(src)),
                        format!("{:?}", self.shape(dst)),
                    ));
                }
                Ok((src, dst))
            })
            .collect::<Result<_>>()?;
        if pairs.is_empty() {
            return Err(Error::config(format!("no parameters under prefix {online_prefix}")));
        }
        for (src, dst) in pairs {
            let src_vals = self.entries[src].value.clone();
            let dst_vals = &mut self.entries[dst].value;
            for (d, s) in dst_vals.iter_mut().zip(src_vals) {
                *d = one_minus * *d + tau * s;
            }
        }
        Ok(())
    }

    /// Hard copy `online_prefix` values over `target_prefix` (used at init).
    pub fn copy_to_target(&mut self, online_prefix: &str, target_prefix: &str) -> Result<()> {
        self.ema_to_target(online_prefix, target_prefix, 1.0)
    }

    // ---- serialization -------------------------------------------------

    /// Binary layout: [u64 header_len][header JSON][packed LE arrays].
    /// The header records names, shapes, dtype, per-entry Adam step counts
    /// and byte offsets of the value/m/v arrays within the payload.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut payload: Vec<u8> = Vec::new();
        let mut metas = Vec::with_capacity(self.entries.len());
        for e in &self.entries {
            let off_value = payload.len() as u64;
            F::write_le(&e.value, &mut payload);
            let off_m = payload.len() as u64;
            F::write_le(&e.m, &mut payload);
            let off_v = payload.len() as u64;
            F::write_le(&e.v, &mut payload);
            metas.push(ParamMeta {
                name: e.name.clone(),
                rows: e.rows,
                cols: e.cols,
                adam_t: e.t,
                off_value,
                off_m,
                off_v,
            });
        }
        let header = ParamsHeader {
            version: PARAMS_FORMAT_VERSION,
            dtype: F::dtype(),
            params: metas,
        };
        let header_bytes = serde_json::to_vec(&header).expect("header serialization");
        let mut out = Vec::with_capacity(8 + header_bytes.len() + payload.len());
        out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
        out.extend_from_slice(&header_bytes);
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<ParamSet<F>> {
        let (header, payload) = parse_header(bytes)?;
        if header.dtype != F::dtype() {
            return Err(Error::config(format!(
                "parameter blob is {}, this run uses {}",
                header.dtype,
                F::dtype()
            )));
        }
        let mut pset = ParamSet::new();
        for meta in &header.params {
            let n = meta.rows * meta.cols;
            let value = read_array::<F>(payload, meta.off_value, n, &meta.name)?;
            let id = pset.add(&meta.name, meta.rows, meta.cols, value)?;
            pset.entries[id].m = read_array::<F>(payload, meta.off_m, n, &meta.name)?;
            pset.entries[id].v = read_array::<F>(payload, meta.off_v, n, &meta.name)?;
            pset.entries[id].t = meta.adam_t;
        }
        Ok(pset)
    }

    /// Load a blob into an already-constructed set. The name/shape inventory
    /// must match exactly; values, Adam moments and step counts are replaced.
    /// Keeps existing ids valid, which is what checkpoint resume relies on.
    pub fn load_from_bytes(&mut self, bytes: &[u8]) -> Result<()> {
        let (header, payload) = parse_header(bytes)?;
        if header.dtype != F::dtype() {
            return Err(Error::config(format!(
                "parameter blob is {}, this run uses {}",
                header.dtype,
                F::dtype()
            )));
        }
        if header.params.len() != self.entries.len() {
            return Err(Error::config(format!(
                "parameter count mismatch: blob has {}, model has {}",
                header.params.len(),
                self.entries.len()
            )));
        }
        for meta in &header.params {
            let id = self
                .id(&meta.name)
                .ok_or_else(|| Error::config(format!("blob parameter {} not in model", meta.name)))?;
            if self.shape(id) != (meta.rows, meta.cols) {
                return Err(Error::shape(
                    &meta.name,
                    format!("{:?}", self.shape(id)),
                    format!("({}, {})", meta.rows, meta.cols),
                ));
            }
            let n = meta.rows * meta.cols;
            self.entries[id].value = read_array::<F>(payload, meta.off_value, n, &meta.name)?;
            self.entries[id].m = read_array::<F>(payload, meta.off_m, n, &meta.name)?;
            self.entries[id].v = read_array::<F>(payload, meta.off_v, n, &meta.name)?;
            self.entries[id].t = meta.adam_t;
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct ParamsHeader {
    version: u32,
    dtype: Dtype,
    params: Vec<ParamMeta>,
}

#[derive(Serialize, Deserialize)]
struct ParamMeta {
    name: String,
    rows: usize,
    cols: usize,
    adam_t: u64,
    off_value: u64,
    off_m: u64,
    off_v: u64,
}

fn parse_header(bytes: &[u8]) -> Result<(ParamsHeader, &[u8])> {
    if bytes.len() < 8 {
        return Err(Error::Corrupt("parameter blob shorter than length prefix".into()));
    }
    let hlen = u64::from_le_bytes(bytes[0..8].try_into().unwrap()) as usize;
    if bytes.len() < 8 + hlen {
        return Err(Error::Corrupt("parameter header truncated".into()));
    }
    let header: ParamsHeader = serde_json::from_slice(&bytes[8..8 + hlen])?;
    if header.version != PARAMS_FORMAT_VERSION {
        return Err(Error::Version {
            found: header.version,
            expected: PARAMS_FORMAT_VERSION,
        });
    }
    Ok((header, &bytes[8 + hlen..]))
}

fn read_array<F: Real>(payload: &[u8], off: u64, n: usize, name: &str) -> Result<Vec<F>> {
    let width = match F::dtype() {
        Dtype::F32 => 4,
        Dtype::F64 => 8,
    };
    let start = off as usize;
    let end = start + n * width;
    if end > payload.len() {
        return Err(Error::Corrupt(format!("array {name} out of payload bounds")));
    }
    F::read_le(&payload[start..end]).ok_or_else(|| Error::Corrupt(format!("array {name} misaligned")))
}

// ---- MLPs ---------------------------------------------------------------

/// Output-layer activation. Hidden layers are always ELU.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutAct {
    Linear,
    Tanh,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
    pub output_activation: OutAct,
}

impl MlpSpec {
    pub fn new(input_dim: usize, hidden: &[usize], output_dim: usize, output_activation: OutAct) -> Self {
        MlpSpec {
            input_dim,
            hidden: hidden.to_vec(),
            output_dim,
            output_activation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(Error::config("MLP input/output dims must be positive"));
        }
        if self.hidden.iter().any(|&h| h == 0) {
            return Err(Error::config("MLP hidden widths must be positive"));
        }
        Ok(())
    }

    /// (fan_in, fan_out) per linear layer, including the output layer.
    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 1);
        let mut prev = self.input_dim;
        for &h in &self.hidden {
            dims.push((prev, h));
            prev = h;
        }
        dims.push((prev, self.output_dim));
        dims
    }
}

/// Parameter ids of one MLP within a [`ParamSet`], plus its spec.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub spec: MlpSpec,
    prefix: String,
    layers: Vec<(usize, usize)>, // (weight id, bias id)
}

/// Register an MLP's parameters under `prefix` and return its handle.
/// Weights are U(-1/sqrt(fan_in), 1/sqrt(fan_in)); biases start at zero.
/// Draws happen in f64 so init is identical across precisions.
pub fn init_mlp<F: Real>(
    pset: &mut ParamSet<F>,
    prefix: &str,
    spec: &MlpSpec,
    rng: &mut ChaCha8Rng,
) -> Result<Mlp> {
    spec.validate()?;
    let mut layers = Vec::new();
    for (li, (fan_in, fan_out)) in spec.layer_dims().into_iter().enumerate() {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w: Vec<F> = (0..fan_in * fan_out)
            .map(|_| F::from_f64(rng.random_range(-bound..bound)))
            .collect();
        let w_id = pset.add(&format!("{prefix}.l{li}.w"), fan_in, fan_out, w)?;
        let b_id = pset.add(&format!("{prefix}.l{li}.b"), 1, fan_out, vec![F::ZERO; fan_out])?;
        layers.push((w_id, b_id));
    }
    Ok(Mlp {
        spec: spec.clone(),
        prefix: prefix.to_string(),
        layers,
    })
}

impl Mlp {
    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    /// Re-resolve parameter ids by name (after rebuilding a ParamSet).
    pub fn rebind<F: Real>(&mut self, pset: &ParamSet<F>) -> Result<()> {
        for (li, (w, b)) in self.layers.iter_mut().enumerate() {
            let wname = format!("{}.l{li}.w", self.prefix);
            let bname = format!("{}.l{li}.b", self.prefix);
            *w = pset
                .id(&wname)
                .ok_or_else(|| Error::config(format!("missing parameter {wname}")))?;
            *b = pset
                .id(&bname)
                .ok_or_else(|| Error::config(format!("missing parameter {bname}")))?;
        }
        Ok(())
    }

    fn check_input(&self, cols: usize) -> Result<()> {
        if cols != self.spec.input_dim {
            return Err(Error::shape(
                &self.prefix,
                format!("input dim {}", self.spec.input_dim),
                format!("{cols}"),
            ));
        }
        Ok(())
    }

    /// Put this MLP's parameters on a tape once; `TapedMlp::apply` can then
    /// be called repeatedly (latent rollouts reuse the dynamics net H times).
    pub fn bind<F: Real>(&self, tape: &mut Tape<F>, pset: &ParamSet<F>) -> TapedMlp {
        let nodes = self
            .layers
            .iter()
            .map(|&(w, b)| (tape.param(pset, w), tape.param(pset, b)))
            .collect();
        TapedMlp {
            spec: self.spec.clone(),
            prefix: self.prefix.clone(),
            nodes,
        }
    }

    /// Forward pass without a tape, for inference-only paths (acting,
    /// planning, evaluation). Identical arithmetic to the taped version.
    pub fn eval<F: Real>(&self, pset: &ParamSet<F>, x: &Mat<F>) -> Result<Mat<F>> {
        self.check_input(x.cols())?;
        let mut cur = x.clone();
        let last = self.layers.len() - 1;
        for (li, &(w_id, b_id)) in self.layers.iter().enumerate() {
            let (fan_in, fan_out) = pset.shape(w_id);
            let mut out = Mat::zeros(cur.rows(), fan_out);
            F::gemm(
                cur.rows(),
                fan_in,
                fan_out,
                F::ONE,
                cur.as_slice(),
                pset.value(w_id),
                F::ZERO,
                out.as_mut_slice(),
            );
            let bias = pset.value(b_id).to_vec();
            for i in 0..out.rows() {
                let row = out.row_mut(i);
                for (o, &bv) in row.iter_mut().zip(&bias) {
                    *o += bv;
                }
            }
            if li < last {
                for v in out.as_mut_slice() {
                    *v = if *v > F::ZERO { *v } else { v.exp() - F::ONE };
                }
            } else if self.spec.output_activation == OutAct::Tanh {
                for v in out.as_mut_slice() {
                    *v = v.tanh();
                }
            }
            cur = out;
        }
        Ok(cur)
    }
}

/// An MLP whose parameters are already nodes on some tape.
pub struct TapedMlp {
    spec: MlpSpec,
    prefix: String,
    nodes: Vec<(NodeId, NodeId)>,
}

impl TapedMlp {
    pub fn apply<F: Real>(&self, tape: &mut Tape<F>, x: NodeId) -> Result<NodeId> {
        let (_, cols) = tape.shape(x);
        if cols != self.spec.input_dim {
            return Err(Error::shape(
                &self.prefix,
                format!("input dim {}", self.spec.input_dim),
                format!("{cols}"),
            ));
        }
        let mut cur = x;
        let last = self.nodes.len() - 1;
        for (li, &(w, b)) in self.nodes.iter().enumerate() {
            cur = tape.matmul(cur, w);
            cur = tape.add_bias(cur, b);
            if li < last {
                cur = tape.elu(cur);
            } else if self.spec.output_activation == OutAct::Tanh {
                cur = tape.tanh(cur);
            }
        }
        Ok(cur)
    }
}
