//! The recording tape: forward ops build nodes, `backward` replays them in
//! reverse. Every node owns its value, so node ids stay valid for the tape's
//! lifetime and values can be inspected after the fact (losses, diagnostics).

use super::params::ParamSet;
use crate::error::{Error, Result};
use crate::math::{Mat, Real};

/// Handle to a node on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(pub usize);

enum Op<F> {
    /// Constant input; also the result of `detach`.
    Leaf,
    /// Copy of a [`ParamSet`] entry; backward accumulates into its grad.
    Param { param: usize },
    Matmul { a: NodeId, b: NodeId },
    /// Row-broadcast add of a `[1, n]` bias to an `[m, n]` input.
    AddBias { x: NodeId, b: NodeId },
    Elu { x: NodeId },
    Tanh { x: NodeId },
    Exp { x: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    /// scale * x + shift, elementwise with scalar constants.
    Affine { x: NodeId, scale: F },
    SumAll { x: NodeId },
    MeanAll { x: NodeId },
    ConcatCols { a: NodeId, b: NodeId },
    SliceCols { x: NodeId, start: usize },
    /// Elementwise min; ties route the gradient to the first argument.
    MinElem { a: NodeId, b: NodeId },
    /// Clamp to [lo, hi]; gradient passes through on the closed interval.
    Clamp { x: NodeId, lo: F, hi: F },
    /// Per-row negative cosine similarity with an epsilon-guarded denominator:
    /// out_i = -(a_i . b_i) / (|a_i| |b_i| + 1e-8), shape [m, 1].
    NegCosineRows { a: NodeId, b: NodeId },
}

struct Node<F> {
    rows: usize,
    cols: usize,
    value: Vec<F>,
    op: Op<F>,
}

pub struct Tape<F: Real> {
    nodes: Vec<Node<F>>,
}

const COS_EPS: f64 = 1e-8;
/// Rows with norm below this are treated as directionless: cosine loss and
/// its gradient are both zero for them.
const NORM_TINY: f64 = 1e-12;

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        let n = &self.nodes[id.0];
        (n.rows, n.cols)
    }

    pub fn value(&self, id: NodeId) -> &[F] {
        &self.nodes[id.0].value
    }

    pub fn value_mat(&self, id: NodeId) -> Mat<F> {
        let n = &self.nodes[id.0];
        Mat::from_vec(n.rows, n.cols, n.value.clone())
    }

    /// Value of a scalar (1x1) node as f64.
    pub fn scalar(&self, id: NodeId) -> f64 {
        let n = &self.nodes[id.0];
        assert_eq!(n.value.len(), 1, "scalar() on non-scalar node");
        n.value[0].to_f64()
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<F>, op: Op<F>) -> NodeId {
        debug_assert_eq!(value.len(), rows * cols);
        self.nodes.push(Node { rows, cols, value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, m: &Mat<F>) -> NodeId {
        self.push(m.rows(), m.cols(), m.as_slice().to_vec(), Op::Leaf)
    }

    pub fn leaf_scalar(&mut self, v: F) -> NodeId {
        self.push(1, 1, vec![v], Op::Leaf)
    }

    /// Copy of `x`'s value with the graph history cut (stop-gradient).
    pub fn detach(&mut self, x: NodeId) -> NodeId {
        let n = &self.nodes[x.0];
        self.push(n.rows, n.cols, n.value.clone(), Op::Leaf)
    }

    /// Bring a parameter onto the tape. Gradients flow back into the set.
    pub fn param(&mut self, pset: &ParamSet<F>, param: usize) -> NodeId {
        let (rows, cols) = pset.shape(param);
        self.push(rows, cols, pset.value(param).to_vec(), Op::Param { param })
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (m, ka) = self.shape(a);
        let (kb, n) = self.shape(b);
        assert_eq!(ka, kb, "matmul inner dims {ka} vs {kb}");
        let mut out = vec![F::ZERO; m * n];
        F::gemm(m, ka, n, F::ONE, self.value(a), self.value(b), F::ZERO, &mut out);
        self.push(m, n, out, Op::Matmul { a, b })
    }

    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> NodeId {
        let (m, n) = self.shape(x);
        let (br, bn) = self.shape(b);
        assert_eq!((br, bn), (1, n), "bias must be [1, {n}], got [{br}, {bn}]");
        let mut out = self.value(x).to_vec();
        let bias = self.value(b).to_vec();
        for row in out.chunks_exact_mut(n) {
            for (o, &bv) in row.iter_mut().zip(&bias) {
                *o += bv;
            }
        }
        self.push(m, n, out, Op::AddBias { x, b })
    }

    pub fn elu(&mut self, x: NodeId) -> NodeId {
        let (m, n) = self.shape(x);
        let out: Vec<F> = self
            .value(x)
            .iter()
            .map(|&v| if v > F::ZERO { v } else { v.exp() - F::ONE })
            .collect();
        self.push(m, n, out, Op::Elu { x })
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let (m, n) = self.shape(x);
        let out: Vec<F> = self.value(x).iter().map(|&v| v.tanh()).collect();
        self.push(m, n, out, Op::Tanh { x })
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        let (m, n) = self.shape(x);
        let out: Vec<F> = self.value(x).iter().map(|&v| v.exp()).collect();
        self.push(m, n, out, Op::Exp { x })
    }

    fn binary_same_shape(&mut self, a: NodeId, b: NodeId, f: impl Fn(F, F) -> F, op: Op<F>) -> NodeId {
        let (m, n) = self.shape(a);
        assert_eq!(self.shape(b), (m, n), "elementwise shape mismatch");
        let out: Vec<F> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        self.push(m, n, out, op)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary_same_shape(a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary_same_shape(a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary_same_shape(a, b, |x, y| x * y, Op::Mul { a, b })
    }

    pub fn min_elem(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary_same_shape(a, b, |x, y| x.minimum(y), Op::MinElem { a, b })
    }

    pub fn affine(&mut self, x: NodeId, scale: F, shift: F) -> NodeId {
        let (m, n) = self.shape(x);
        let out: Vec<F> = self.value(x).iter().map(|&v| v * scale + shift).collect();
        self.push(m, n, out, Op::Affine { x, scale })
    }

    pub fn scale(&mut self, x: NodeId, s: F) -> NodeId {
        self.affine(x, s, F::ZERO)
    }

    pub fn neg(&mut self, x: NodeId) -> NodeId {
        self.affine(x, -F::ONE, F::ZERO)
    }

    pub fn clamp(&mut self, x: NodeId, lo: F, hi: F) -> NodeId {
        assert!(lo <= hi, "clamp bounds inverted");
        let (m, n) = self.shape(x);
        let out: Vec<F> = self
            .value(x)
            .iter()
            .map(|&v| v.maximum(lo).minimum(hi))
            .collect();
        self.push(m, n, out, Op::Clamp { x, lo, hi })
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let mut acc = F::ZERO;
        for &v in self.value(x) {
            acc += v;
        }
        self.push(1, 1, vec![acc], Op::SumAll { x })
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let count = self.value(x).len();
        assert!(count > 0, "mean of empty node");
        let mut acc = F::ZERO;
        for &v in self.value(x) {
            acc += v;
        }
        let mean = acc / F::from_f64(count as f64);
        self.push(1, 1, vec![mean], Op::MeanAll { x })
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (m, na) = self.shape(a);
        let (mb, nb) = self.shape(b);
        assert_eq!(m, mb, "concat_cols row mismatch");
        let mut out = Vec::with_capacity(m * (na + nb));
        for i in 0..m {
            out.extend_from_slice(&self.value(a)[i * na..(i + 1) * na]);
            out.extend_from_slice(&self.value(b)[i * nb..(i + 1) * nb]);
        }
        self.push(m, na + nb, out, Op::ConcatCols { a, b })
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, width: usize) -> NodeId {
        let (m, n) = self.shape(x);
        assert!(start + width <= n, "slice_cols [{start}, {}) out of {n}", start + width);
        let mut out = Vec::with_capacity(m * width);
        for i in 0..m {
            out.extend_from_slice(&self.value(x)[i * n + start..i * n + start + width]);
        }
        self.push(m, width, out, Op::SliceCols { x, start })
    }

    /// Per-row negative cosine similarity, shape [m, 1]. Rows whose norm is
    /// ~zero produce 0 with zero gradient rather than NaN.
    pub fn neg_cosine_rows(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (m, n) = self.shape(a);
        assert_eq!(self.shape(b), (m, n), "neg_cosine_rows shape mismatch");
        let mut out = Vec::with_capacity(m);
        for i in 0..m {
            let (s, na, nb) = row_dot_norms(&self.value(a)[i * n..(i + 1) * n], &self.value(b)[i * n..(i + 1) * n]);
            let denom = na * nb + COS_EPS;
            out.push(F::from_f64(-s / denom));
        }
        self.push(m, 1, out, Op::NegCosineRows { a, b })
    }

    /// Reverse pass from a scalar loss node. Gradients of every parameter
    /// node reachable from `loss` are accumulated into `pset` (on top of
    /// whatever is already there; call `pset.zero_grads()` first for a fresh
    /// pass). Multiple uses of a node sum their contributions.
    pub fn backward(&self, loss: NodeId, pset: &mut ParamSet<F>) -> Result<()> {
        let ln = &self.nodes[loss.0];
        if ln.rows * ln.cols != 1 {
            return Err(Error::usage(format!(
                "backward requires a scalar loss node, got shape [{}, {}]",
                ln.rows, ln.cols
            )));
        }
        let mut grads: Vec<Option<Vec<F>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![F::ONE]);

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            match node.op {
                Op::Leaf => {}
                Op::Param { param } => pset.accum_grad(param, &g),
                Op::Matmul { a, b } => {
                    let (m, k) = self.shape(a);
                    let n = node.cols;
                    {
                        // dA += g @ B^T : [m,n] x [n,k] using B's transposed view
                        let da = ensure(&mut grads, a, m * k);
                        F::gemm_strided(
                            m,
                            n,
                            k,
                            F::ONE,
                            &g,
                            n as isize,
                            1,
                            &self.nodes[b.0].value,
                            1,
                            n as isize,
                            F::ONE,
                            da,
                        );
                    }
                    {
                        // dB += A^T @ g : [k,m] x [m,n] using A's transposed view
                        let db = ensure(&mut grads, b, k * n);
                        F::gemm_strided(
                            k,
                            m,
                            n,
                            F::ONE,
                            &self.nodes[a.0].value,
                            1,
                            k as isize,
                            &g,
                            n as isize,
                            1,
                            F::ONE,
                            db,
                        );
                    }
                }
                Op::AddBias { x, b } => {
                    let n = node.cols;
                    {
                        let dx = ensure(&mut grads, x, g.len());
                        for (d, &gv) in dx.iter_mut().zip(&g) {
                            *d += gv;
                        }
                    }
                    {
                        let db = ensure(&mut grads, b, n);
                        for row in g.chunks_exact(n) {
                            for (d, &gv) in db.iter_mut().zip(row) {
                                *d += gv;
                            }
                        }
                    }
                }
                Op::Elu { x } => {
                    let dx = ensure(&mut grads, x, g.len());
                    let xv = &self.nodes[x.0].value;
                    // For v <= 0 the output stores e^v - 1, so e^v = out + 1.
                    for i in 0..g.len() {
                        let d = if xv[i] > F::ZERO { F::ONE } else { node.value[i] + F::ONE };
                        dx[i] += g[i] * d;
                    }
                }
                Op::Tanh { x } => {
                    let dx = ensure(&mut grads, x, g.len());
                    for i in 0..g.len() {
                        dx[i] += g[i] * (F::ONE - node.value[i] * node.value[i]);
                    }
                }
                Op::Exp { x } => {
                    let dx = ensure(&mut grads, x, g.len());
                    for i in 0..g.len() {
                        dx[i] += g[i] * node.value[i];
                    }
                }
                Op::Add { a, b } => {
                    {
                        let da = ensure(&mut grads, a, g.len());
                        for (d, &gv) in da.iter_mut().zip(&g) {
                            *d += gv;
                        }
                    }
                    let db = ensure(&mut grads, b, g.len());
                    for (d, &gv) in db.iter_mut().zip(&g) {
                        *d += gv;
                    }
                }
                Op::Sub { a, b } => {
                    {
                        let da = ensure(&mut grads, a, g.len());
                        for (d, &gv) in da.iter_mut().zip(&g) {
                            *d += gv;
                        }
                    }
                    let db = ensure(&mut grads, b, g.len());
                    for (d, &gv) in db.iter_mut().zip(&g) {
                        *d -= gv;
                    }
                }
                Op::Mul { a, b } => {
                    {
                        let da = ensure(&mut grads, a, g.len());
                        let bv = &self.nodes[b.0].value;
                        for i in 0..g.len() {
                            da[i] += g[i] * bv[i];
                        }
                    }
                    let db = ensure(&mut grads, b, g.len());
                    let av = &self.nodes[a.0].value;
                    for i in 0..g.len() {
                        db[i] += g[i] * av[i];
                    }
                }
                Op::MinElem { a, b } => {
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    {
                        let da = ensure(&mut grads, a, g.len());
                        for i in 0..g.len() {
                            if av[i] <= bv[i] {
                                da[i] += g[i];
                            }
                        }
                    }
                    let db = ensure(&mut grads, b, g.len());
                    for i in 0..g.len() {
                        if av[i] > bv[i] {
                            db[i] += g[i];
                        }
                    }
                }
                Op::Affine { x, scale } => {
                    let dx = ensure(&mut grads, x, g.len());
                    for (d, &gv) in dx.iter_mut().zip(&g) {
                        *d += gv * scale;
                    }
                }
                Op::Clamp { x, lo, hi } => {
                    let dx = ensure(&mut grads, x, g.len());
                    let xv = &self.nodes[x.0].value;
                    for i in 0..g.len() {
                        if xv[i] >= lo && xv[i] <= hi {
                            dx[i] += g[i];
                        }
                    }
                }
                Op::SumAll { x } => {
                    let gv = g[0];
                    let len = self.nodes[x.0].value.len();
                    let dx = ensure(&mut grads, x, len);
                    for d in dx.iter_mut() {
                        *d += gv;
                    }
                }
                Op::MeanAll { x } => {
                    let len = self.nodes[x.0].value.len();
                    let gv = g[0] / F::from_f64(len as f64);
                    let dx = ensure(&mut grads, x, len);
                    for d in dx.iter_mut() {
                        *d += gv;
                    }
                }
                Op::ConcatCols { a, b } => {
                    let na = self.nodes[a.0].cols;
                    let nb = self.nodes[b.0].cols;
                    let m = node.rows;
                    {
                        let da = ensure(&mut grads, a, m * na);
                        for i in 0..m {
                            for j in 0..na {
                                da[i * na + j] += g[i * (na + nb) + j];
                            }
                        }
                    }
                    let db = ensure(&mut grads, b, m * nb);
                    for i in 0..m {
                        for j in 0..nb {
                            db[i * nb + j] += g[i * (na + nb) + na + j];
                        }
                    }
                }
                Op::SliceCols { x, start } => {
                    let (m, n) = self.shape(x);
                    let w = node.cols;
                    let dx = ensure(&mut grads, x, m * n);
                    for i in 0..m {
                        for j in 0..w {
                            dx[i * n + start + j] += g[i * w + j];
                        }
                    }
                }
                Op::NegCosineRows { a, b } => {
                    let (m, n) = self.shape(a);
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    // c = -s / D with s = a.b, D = |a||b| + eps:
                    //   dc/da = -b/D + s * |b| * a / (|a| * D^2)   (and symmetrically for b)
                    // accumulated into both parents below.
                    for i in 0..m {
                        let ar = &av[i * n..(i + 1) * n];
                        let br = &bv[i * n..(i + 1) * n];
                        let (s, na, nb) = row_dot_norms(ar, br);
                        let denom = na * nb + COS_EPS;
                        let gi = g[i].to_f64();
                        if na > NORM_TINY {
                            let da = ensure(&mut grads, a, m * n);
                            let coef_b = -1.0 / denom;
                            let coef_a = s * nb / (na * denom * denom);
                            for j in 0..n {
                                let d = coef_b * br[j].to_f64() + coef_a * ar[j].to_f64();
                                da[i * n + j] += F::from_f64(gi * d);
                            }
                        }
                        if nb > NORM_TINY {
                            let db = ensure(&mut grads, b, m * n);
                            let coef_a = -1.0 / denom;
                            let coef_b = s * na / (nb * denom * denom);
                            for j in 0..n {
                                let d = coef_a * ar[j].to_f64() + coef_b * br[j].to_f64();
                                db[i * n + j] += F::from_f64(gi * d);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

fn ensure<F: Real>(grads: &mut [Option<Vec<F>>], id: NodeId, len: usize) -> &mut Vec<F> {
    grads[id.0].get_or_insert_with(|| vec![F::ZERO; len])
}

fn row_dot_norms<F: Real>(a: &[F], b: &[F]) -> (f64, f64, f64) {
    let mut s = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for i in 0..a.len() {
        let x = a[i].to_f64();
        let y = b[i].to_f64();
        s += x * y;
        na += x * x;
        nb += y * y;
    }
    (s, na.sqrt(), nb.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn scalar_param(pset: &mut ParamSet<f64>, name: &str, v: f64) -> usize {
        pset.add(name, 1, 1, vec![v]).unwrap()
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut pset = ParamSet::<f64>::new();
        let p = pset.add("w", 2, 2, vec![1.0; 4]).unwrap();
        let mut tape = Tape::new();
        let w = tape.param(&pset, p);
        let y = tape.tanh(w);
        assert!(tape.backward(y, &mut pset).is_err());
    }

    #[test]
    fn sum_of_param_gives_ones() {
        let mut pset = ParamSet::<f64>::new();
        let p = pset.add("w", 2, 3, vec![0.5; 6]).unwrap();
        let mut tape = Tape::new();
        let w = tape.param(&pset, p);
        let s = tape.sum_all(w);
        tape.backward(s, &mut pset).unwrap();
        assert_eq!(pset.grad(p), &[1.0; 6]);
    }

    #[test]
    fn shared_node_accumulates() {
        // loss = sum(w * w) => dL/dw = 2w
        let mut pset = ParamSet::<f64>::new();
        let p = pset.add("w", 1, 3, vec![1.0, -2.0, 3.0]).unwrap();
        let mut tape = Tape::new();
        let w = tape.param(&pset, p);
        let sq = tape.mul(w, w);
        let s = tape.sum_all(sq);
        tape.backward(s, &mut pset).unwrap();
        assert_eq!(pset.grad(p), &[2.0, -4.0, 6.0]);
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut pset = ParamSet::<f64>::new();
        let p = scalar_param(&mut pset, "w", 3.0);
        let mut tape = Tape::new();
        let w = tape.param(&pset, p);
        let stopped = tape.detach(w);
        let prod = tape.mul(w, stopped); // d/dw (w * const(w)) = const(w) = 3
        let s = tape.sum_all(prod);
        tape.backward(s, &mut pset).unwrap();
        assert_eq!(pset.grad(p), &[3.0]);
    }

    #[test]
    fn matmul_grads_match_hand_calc() {
        // loss = sum(A @ B): dA = ones @ B^T (row sums of B rows), dB = A^T @ ones
        let mut pset = ParamSet::<f64>::new();
        let a = pset.add("a", 2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = pset.add("b", 3, 2, vec![1.0, -1.0, 2.0, 0.5, 0.0, 3.0]).unwrap();
        let mut tape = Tape::new();
        let na = tape.param(&pset, a);
        let nb = tape.param(&pset, b);
        let c = tape.matmul(na, nb);
        let s = tape.sum_all(c);
        tape.backward(s, &mut pset).unwrap();
        // dA[i][k] = sum_j B[k][j]
        assert_eq!(pset.grad(a), &[0.0, 2.5, 3.0, 0.0, 2.5, 3.0]);
        // dB[k][j] = sum_i A[i][k]
        assert_eq!(pset.grad(b), &[5.0, 5.0, 7.0, 7.0, 9.0, 9.0]);
    }

    #[test]
    fn elu_values_and_grads() {
        let mut pset = ParamSet::<f64>::new();
        let p = pset.add("x", 1, 3, vec![-1.0, 0.0, 2.0]).unwrap();
        let mut tape = Tape::new();
        let x = tape.param(&pset, p);
        let y = tape.elu(x);
        assert_relative_eq!(tape.value(y)[0], (-1.0f64).exp() - 1.0, epsilon = 1e-15);
        assert_eq!(tape.value(y)[1], 0.0);
        assert_eq!(tape.value(y)[2], 2.0);
        let s = tape.sum_all(y);
        tape.backward(s, &mut pset).unwrap();
        assert_relative_eq!(pset.grad(p)[0], (-1.0f64).exp(), epsilon = 1e-15);
        assert_eq!(pset.grad(p)[1], 1.0); // v = 0 takes the e^v branch: e^0 = 1
        assert_eq!(pset.grad(p)[2], 1.0);
    }

    #[test]
    fn min_elem_tie_goes_to_first() {
        let mut pset = ParamSet::<f64>::new();
        let a = pset.add("a", 1, 2, vec![1.0, 5.0]).unwrap();
        let b = pset.add("b", 1, 2, vec![1.0, 2.0]).unwrap();
        let mut tape = Tape::new();
        let na = tape.param(&pset, a);
        let nb = tape.param(&pset, b);
        let m = tape.min_elem(na, nb);
        let s = tape.sum_all(m);
        tape.backward(s, &mut pset).unwrap();
        assert_eq!(pset.grad(a), &[1.0, 0.0]);
        assert_eq!(pset.grad(b), &[0.0, 1.0]);
    }

    #[test]
    fn concat_slice_roundtrip_grads() {
        let mut pset = ParamSet::<f64>::new();
        let a = pset.add("a", 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = pset.add("b", 2, 1, vec![5.0, 6.0]).unwrap();
        let mut tape = Tape::new();
        let na = tape.param(&pset, a);
        let nb = tape.param(&pset, b);
        let cat = tape.concat_cols(na, nb);
        // keep only the b column; a gets zero grads, b ones
        let right = tape.slice_cols(cat, 2, 1);
        let s = tape.sum_all(right);
        tape.backward(s, &mut pset).unwrap();
        assert_eq!(pset.grad(a), &[0.0; 4]);
        assert_eq!(pset.grad(b), &[1.0, 1.0]);
    }

    #[test]
    fn neg_cosine_closed_forms() {
        // parallel -> -1, orthogonal -> 0, anti-parallel -> +1 (up to eps)
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(&Mat::from_f64s(3, 2, &[1.0, 0.0, 1.0, 0.0, 2.0, 0.0]));
        let b = tape.leaf(&Mat::from_f64s(3, 2, &[3.0, 0.0, 0.0, 1.0, -1.0, 0.0]));
        let c = tape.neg_cosine_rows(a, b);
        let v = tape.value(c);
        assert_relative_eq!(v[0], -1.0, epsilon = 1e-7);
        assert_relative_eq!(v[1], 0.0, epsilon = 1e-12);
        assert_relative_eq!(v[2], 1.0, epsilon = 1e-7);
    }

    #[test]
    fn neg_cosine_zero_row_is_safe() {
        let mut pset = ParamSet::<f64>::new();
        let p = pset.add("a", 1, 3, vec![0.0, 0.0, 0.0]).unwrap();
        let mut tape = Tape::new();
        let a = tape.param(&pset, p);
        let b = tape.leaf(&Mat::from_f64s(1, 3, &[1.0, 2.0, 3.0]));
        let c = tape.neg_cosine_rows(a, b);
        assert_eq!(tape.value(c)[0], 0.0);
        let s = tape.sum_all(c);
        tape.backward(s, &mut pset).unwrap();
        assert!(pset.grad(p).iter().all(|g| g.is_finite()));
        assert_eq!(pset.grad(p), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn clamp_gradient_masks_outside() {
        let mut pset = ParamSet::<f64>::new();
        let p = pset.add("x", 1, 3, vec![-5.0, 0.5, 7.0]).unwrap();
        let mut tape = Tape::new();
        let x = tape.param(&pset, p);
        let y = tape.clamp(x, -1.0, 1.0);
        assert_eq!(tape.value(y), &[-1.0, 0.5, 1.0]);
        let s = tape.sum_all(y);
        tape.backward(s, &mut pset).unwrap();
        assert_eq!(pset.grad(p), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn forward_backward_is_bitwise_deterministic() {
        let run = || -> (Vec<f64>, Vec<f64>) {
            let mut pset = ParamSet::<f64>::new();
            let p = pset
                .add("w", 3, 3, (0..9).map(|i| (i as f64) * 0.37 - 1.1).collect())
                .unwrap();
            let mut tape = Tape::new();
            let w = tape.param(&pset, p);
            let x = tape.leaf(&Mat::from_f64s(2, 3, &[0.3, -0.4, 0.9, 1.3, 0.2, -0.8]));
            let h = tape.matmul(x, w);
            let h = tape.tanh(h);
            let h2 = tape.matmul(h, w);
            let e = tape.elu(h2);
            let loss = tape.mean_all(e);
            tape.backward(loss, &mut pset).unwrap();
            (vec![tape.scalar(loss)], pset.grad(p).to_vec())
        };
        let (l1, g1) = run();
        let (l2, g2) = run();
        assert_eq!(l1[0].to_bits(), l2[0].to_bits());
        for (a, b) in g1.iter().zip(&g2) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
