//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records an eagerly-evaluated tape of operations. Calling
//! [`Graph::backward`] on a scalar node walks the tape in reverse and
//! returns gradients for every parameter node. The tape is single-use:
//! build, read values, differentiate, drop.
//!
//! Reductions inside every operation run in a fixed order, so forward values
//! and gradients are bitwise reproducible run to run.

use crate::nn::ParamId;
use crate::tensor::{
    conv3d_backward, conv3d_forward, matmul_nn, matmul_nt, matmul_tn, upsample_spatial2_backward,
    upsample_spatial2_forward, upsample_temporal_causal_backward, upsample_temporal_causal_forward,
    Conv3dSpec, Tensor,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(pub usize);

#[derive(Clone, Debug)]
enum Op {
    Input,
    Param(ParamId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    MatMul(NodeId, NodeId),
    MatMulNT(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    RowAffine { x: NodeId, scale: NodeId, shift: NodeId },
    RowMul { x: NodeId, gate: NodeId },
    SliceCols { x: NodeId, start: usize, len: usize },
    ConcatCols(Vec<NodeId>),
    Softmax(NodeId),
    LayerNorm { x: NodeId, eps: f64 },
    Silu(NodeId),
    GeluTanh(NodeId),
    Exp(NodeId),
    Tanh(NodeId),
    MeanAll(NodeId),
    AddFactorizedPos { x: NodeId, pt: NodeId, ph: NodeId, pw: NodeId, grid: (usize, usize, usize) },
    Conv3d { x: NodeId, w: NodeId, b: NodeId, spec: Conv3dSpec, dims: (usize, usize, usize) },
    UpSpatial2(NodeId),
    UpTemporal { x: NodeId, factor: usize },
    Reshape(NodeId),
}

struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Gradients keyed by parameter id, in first-touch order.
#[derive(Debug, Default)]
pub struct Grads {
    entries: Vec<(ParamId, Tensor)>,
}

impl Grads {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.entries.iter().find(|(pid, _)| *pid == id).map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.entries.iter().map(|(id, t)| (*id, t))
    }

    fn accumulate(&mut self, id: ParamId, grad: &[f64], shape: &[usize]) {
        if let Some((_, t)) = self.entries.iter_mut().find(|(pid, _)| *pid == id) {
            let dst = t.data_mut();
            for (d, g) in dst.iter_mut().zip(grad.iter()) {
                *d += g;
            }
        } else {
            self.entries.push((id, Tensor::from_vec(shape, grad.to_vec())));
        }
    }

    /// Adds another gradient set (for fixed-order batch accumulation).
    pub fn merge(&mut self, other: &Grads) {
        for (id, g) in other.iter() {
            self.accumulate(id, g.data(), g.shape());
        }
    }

    /// Scales every gradient in place (e.g. by 1/batch).
    pub fn scale(&mut self, s: f64) {
        for (_, t) in self.entries.iter_mut() {
            for v in t.data_mut() {
                *v *= s;
            }
        }
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Number of columns when a tensor is viewed as rows × last-dim.
fn cols_of(t: &Tensor) -> usize {
    *t.shape().last().expect("tensor with no dimensions")
}

fn rows_of(t: &Tensor) -> usize {
    t.len() / cols_of(t)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { op, value, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn ng(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// A constant leaf; no gradient flows into it.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Input, value, false)
    }

    /// A parameter leaf; gradients are collected for it by `backward`.
    pub fn param(&mut self, id: ParamId, value: Tensor) -> NodeId {
        self.push(Op::Param(id), value, true)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).add(self.value(b));
        let g = self.ng(a) || self.ng(b);
        self.push(Op::Add(a, b), v, g)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).sub(self.value(b));
        let g = self.ng(a) || self.ng(b);
        self.push(Op::Sub(a, b), v, g)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).mul(self.value(b));
        let g = self.ng(a) || self.ng(b);
        self.push(Op::Mul(a, b), v, g)
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.value(a).scale(s);
        let g = self.ng(a);
        self.push(Op::Scale(a, s), v, g)
    }

    pub fn add_scalar(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.value(a).map(|x| x + s);
        let g = self.ng(a);
        self.push(Op::AddScalar(a), v, g)
    }

    /// (m×k)·(k×n) treating both operands as 2-D via their last dimension.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ta, tb) = (self.value(a), self.value(b));
        let (k, n) = (cols_of(tb) as usize, 0);
        let _ = n;
        let m = rows_of(ta);
        let ka = cols_of(ta);
        let kb = rows_of(tb);
        assert_eq!(ka, kb, "matmul inner dims {ka} vs {kb}");
        let n = cols_of(tb);
        let v = Tensor::from_vec(&[m, n], matmul_nn(ta.data(), tb.data(), m, ka, n));
        let _ = k;
        let g = self.ng(a) || self.ng(b);
        self.push(Op::MatMul(a, b), v, g)
    }

    /// (m×k)·(n×k)ᵀ → m×n.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ta, tb) = (self.value(a), self.value(b));
        let m = rows_of(ta);
        let k = cols_of(ta);
        assert_eq!(k, cols_of(tb), "matmul_nt inner dims");
        let n = rows_of(tb);
        let v = Tensor::from_vec(&[m, n], matmul_nt(ta.data(), tb.data(), m, k, n));
        let g = self.ng(a) || self.ng(b);
        self.push(Op::MatMulNT(a, b), v, g)
    }

    /// rows of `x` plus the vector `b`.
    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> NodeId {
        let (tx, tb) = (self.value(x), self.value(b));
        let d = cols_of(tx);
        assert_eq!(tb.len(), d, "bias length");
        let bd = tb.data().to_vec();
        let mut v = tx.clone();
        for row in v.data_mut().chunks_mut(d) {
            for (r, bv) in row.iter_mut().zip(bd.iter()) {
                *r += bv;
            }
        }
        let g = self.ng(x) || self.ng(b);
        self.push(Op::AddBias(x, b), v, g)
    }

    /// y = x ⊙ (1 + scale) + shift, broadcast per row.
    pub fn row_affine(&mut self, x: NodeId, scale: NodeId, shift: NodeId) -> NodeId {
        let d = cols_of(self.value(x));
        assert_eq!(self.value(scale).len(), d);
        assert_eq!(self.value(shift).len(), d);
        let sc = self.value(scale).data().to_vec();
        let sh = self.value(shift).data().to_vec();
        let mut v = self.value(x).clone();
        for row in v.data_mut().chunks_mut(d) {
            for j in 0..d {
                row[j] = row[j] * (1.0 + sc[j]) + sh[j];
            }
        }
        let g = self.ng(x) || self.ng(scale) || self.ng(shift);
        self.push(Op::RowAffine { x, scale, shift }, v, g)
    }

    /// y = x ⊙ gate, broadcast per row.
    pub fn row_mul(&mut self, x: NodeId, gate: NodeId) -> NodeId {
        let d = cols_of(self.value(x));
        assert_eq!(self.value(gate).len(), d);
        let gv = self.value(gate).data().to_vec();
        let mut v = self.value(x).clone();
        for row in v.data_mut().chunks_mut(d) {
            for j in 0..d {
                row[j] *= gv[j];
            }
        }
        let g = self.ng(x) || self.ng(gate);
        self.push(Op::RowMul { x, gate }, v, g)
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let tx = self.value(x);
        let d = cols_of(tx);
        assert!(start + len <= d, "slice_cols out of range");
        let rows = rows_of(tx);
        let mut out = Vec::with_capacity(rows * len);
        for row in tx.data().chunks(d) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let mut shape = tx.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let v = Tensor::from_vec(&shape, out);
        let g = self.ng(x);
        self.push(Op::SliceCols { x, start, len }, v, g)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let rows = rows_of(self.value(parts[0]));
        let total: usize = parts.iter().map(|&p| cols_of(self.value(p))).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                let t = self.value(p);
                let d = cols_of(t);
                assert_eq!(rows_of(t), rows, "concat_cols row mismatch");
                out.extend_from_slice(&t.data()[r * d..(r + 1) * d]);
            }
        }
        let mut shape = self.value(parts[0]).shape().to_vec();
        *shape.last_mut().unwrap() = total;
        let v = Tensor::from_vec(&shape, out);
        let g = parts.iter().any(|&p| self.ng(p));
        self.push(Op::ConcatCols(parts.to_vec()), v, g)
    }

    /// Row-wise softmax over the last dimension.
    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        let tx = self.value(x);
        let d = cols_of(tx);
        let mut v = tx.clone();
        for row in v.data_mut().chunks_mut(d) {
            let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let mut z = 0.0;
            for r in row.iter_mut() {
                *r = (*r - m).exp();
                z += *r;
            }
            for r in row.iter_mut() {
                *r /= z;
            }
        }
        let g = self.ng(x);
        self.push(Op::Softmax(x), v, g)
    }

    /// Row-wise layer norm over the last dimension, no affine.
    pub fn layer_norm(&mut self, x: NodeId, eps: f64) -> NodeId {
        let tx = self.value(x);
        let d = cols_of(tx);
        let mut v = tx.clone();
        for row in v.data_mut().chunks_mut(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for r in row.iter_mut() {
                *r = (*r - mean) * inv;
            }
        }
        let g = self.ng(x);
        self.push(Op::LayerNorm { x, eps }, v, g)
    }

    pub fn silu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|a| a * sigmoid(a));
        let g = self.ng(x);
        self.push(Op::Silu(x), v, g)
    }

    pub fn gelu_tanh(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(gelu_tanh_val);
        let g = self.ng(x);
        self.push(Op::GeluTanh(x), v, g)
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(f64::exp);
        let g = self.ng(x);
        self.push(Op::Exp(x), v, g)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(f64::tanh);
        let g = self.ng(x);
        self.push(Op::Tanh(x), v, g)
    }

    /// Mean over every element; yields a scalar node.
    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(x).mean());
        let g = self.ng(x);
        self.push(Op::MeanAll(x), v, g)
    }

    /// mean((a − b)²) as a scalar node.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let d = self.sub(a, b);
        let sq = self.mul(d, d);
        self.mean_all(sq)
    }

    /// Adds factorized positional embeddings: token (t,h,w) of the
    /// (nt·nh·nw)×D matrix `x` receives pt[t] + ph[h] + pw[w].
    pub fn add_factorized_pos(
        &mut self,
        x: NodeId,
        pt: NodeId,
        ph: NodeId,
        pw: NodeId,
        grid: (usize, usize, usize),
    ) -> NodeId {
        let (nt, nh, nw) = grid;
        let tx = self.value(x);
        let d = cols_of(tx);
        assert_eq!(rows_of(tx), nt * nh * nw, "pos grid mismatch");
        assert_eq!(self.value(pt).shape(), [nt, d]);
        assert_eq!(self.value(ph).shape(), [nh, d]);
        assert_eq!(self.value(pw).shape(), [nw, d]);
        let (tpt, tph, tpw) =
            (self.value(pt).clone(), self.value(ph).clone(), self.value(pw).clone());
        let mut v = tx.clone();
        {
            let data = v.data_mut();
            let mut n = 0;
            for t in 0..nt {
                for h in 0..nh {
                    for w in 0..nw {
                        let row = &mut data[n * d..(n + 1) * d];
                        let (rt, rh, rw) = (
                            &tpt.data()[t * d..(t + 1) * d],
                            &tph.data()[h * d..(h + 1) * d],
                            &tpw.data()[w * d..(w + 1) * d],
                        );
                        for j in 0..d {
                            row[j] += rt[j] + rh[j] + rw[j];
                        }
                        n += 1;
                    }
                }
            }
        }
        let g = self.ng(x) || self.ng(pt) || self.ng(ph) || self.ng(pw);
        self.push(Op::AddFactorizedPos { x, pt, ph, pw, grid }, v, g)
    }

    /// Causal 3D convolution of a [T,H,W,Cin] node.
    pub fn conv3d(&mut self, x: NodeId, w: NodeId, b: NodeId, spec: Conv3dSpec) -> NodeId {
        let tx = self.value(x);
        let sh = tx.shape();
        assert_eq!(sh.len(), 4, "conv3d expects [T,H,W,C]");
        assert_eq!(sh[3], spec.c_in, "conv3d input channels");
        let dims = (sh[0], sh[1], sh[2]);
        let (out, (ot, oh, ow)) = conv3d_forward(
            tx.data(),
            self.value(w).data(),
            self.value(b).data(),
            &spec,
            dims.0,
            dims.1,
            dims.2,
        );
        let v = Tensor::from_vec(&[ot, oh, ow, spec.c_out], out);
        let g = self.ng(x) || self.ng(w) || self.ng(b);
        self.push(Op::Conv3d { x, w, b, spec, dims }, v, g)
    }

    /// Nearest-neighbour ×2 spatial upsample of a [T,H,W,C] node.
    pub fn upsample_spatial2(&mut self, x: NodeId) -> NodeId {
        let tx = self.value(x);
        let [t, h, w, c] = [tx.shape()[0], tx.shape()[1], tx.shape()[2], tx.shape()[3]];
        let out = upsample_spatial2_forward(tx.data(), t, h, w, c);
        let v = Tensor::from_vec(&[t, 2 * h, 2 * w, c], out);
        let g = self.ng(x);
        self.push(Op::UpSpatial2(x), v, g)
    }

    /// Causal temporal upsample of a [T,H,W,C] node.
    pub fn upsample_temporal(&mut self, x: NodeId, factor: usize) -> NodeId {
        let tx = self.value(x);
        let [t, h, w, c] = [tx.shape()[0], tx.shape()[1], tx.shape()[2], tx.shape()[3]];
        let (out, ot) = upsample_temporal_causal_forward(tx.data(), t, h * w * c, factor);
        let v = Tensor::from_vec(&[ot, h, w, c], out);
        let g = self.ng(x);
        self.push(Op::UpTemporal { x, factor }, v, g)
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> NodeId {
        let v = self.value(x).reshape(shape);
        let g = self.ng(x);
        self.push(Op::Reshape(x), v, g)
    }

    /// Reverse pass from the scalar node `loss`; returns parameter gradients.
    pub fn backward(&self, loss: NodeId) -> Grads {
        assert_eq!(self.value(loss).len(), 1, "backward seed must be scalar");
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Grads::default();

        for idx in (0..self.nodes.len()).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Input => {}
                Op::Param(pid) => out.accumulate(*pid, &g, node.value.shape()),
                Op::Add(a, b) => {
                    self.acc(&mut grads, *a, &g);
                    self.acc(&mut grads, *b, &g);
                }
                Op::Sub(a, b) => {
                    self.acc(&mut grads, *a, &g);
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    self.acc(&mut grads, *b, &neg);
                }
                Op::Mul(a, b) => {
                    if self.ng(*a) {
                        let da: Vec<f64> =
                            g.iter().zip(self.value(*b).data()).map(|(g, b)| g * b).collect();
                        self.acc(&mut grads, *a, &da);
                    }
                    if self.ng(*b) {
                        let db: Vec<f64> =
                            g.iter().zip(self.value(*a).data()).map(|(g, a)| g * a).collect();
                        self.acc(&mut grads, *b, &db);
                    }
                }
                Op::Scale(a, s) => {
                    let da: Vec<f64> = g.iter().map(|v| v * s).collect();
                    self.acc(&mut grads, *a, &da);
                }
                Op::AddScalar(a) => self.acc(&mut grads, *a, &g),
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (rows_of(ta), cols_of(ta), cols_of(tb));
                    if self.ng(*a) {
                        let da = matmul_nt(&g, tb.data(), m, n, k);
                        self.acc(&mut grads, *a, &da);
                    }
                    if self.ng(*b) {
                        let db = matmul_tn(ta.data(), &g, m, k, n);
                        self.acc(&mut grads, *b, &db);
                    }
                }
                Op::MatMulNT(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (rows_of(ta), cols_of(ta), rows_of(tb));
                    if self.ng(*a) {
                        let da = matmul_nn(&g, tb.data(), m, n, k);
                        self.acc(&mut grads, *a, &da);
                    }
                    if self.ng(*b) {
                        let db = matmul_tn(&g, ta.data(), m, n, k);
                        self.acc(&mut grads, *b, &db);
                    }
                }
                Op::AddBias(x, b) => {
                    let d = self.value(*b).len();
                    if self.ng(*x) {
                        self.acc(&mut grads, *x, &g);
                    }
                    if self.ng(*b) {
                        let mut db = vec![0.0; d];
                        for row in g.chunks(d) {
                            for (dbv, gv) in db.iter_mut().zip(row.iter()) {
                                *dbv += gv;
                            }
                        }
                        self.acc(&mut grads, *b, &db);
                    }
                }
                Op::RowAffine { x, scale, shift } => {
                    let tx = self.value(*x);
                    let d = cols_of(tx);
                    let sc = self.value(*scale).data();
                    if self.ng(*x) {
                        let mut dx = g.clone();
                        for row in dx.chunks_mut(d) {
                            for j in 0..d {
                                row[j] *= 1.0 + sc[j];
                            }
                        }
                        self.acc(&mut grads, *x, &dx);
                    }
                    if self.ng(*scale) {
                        let mut ds = vec![0.0; d];
                        for (grow, xrow) in g.chunks(d).zip(tx.data().chunks(d)) {
                            for j in 0..d {
                                ds[j] += grow[j] * xrow[j];
                            }
                        }
                        self.acc(&mut grads, *scale, &ds);
                    }
                    if self.ng(*shift) {
                        let mut dsh = vec![0.0; d];
                        for grow in g.chunks(d) {
                            for j in 0..d {
                                dsh[j] += grow[j];
                            }
                        }
                        self.acc(&mut grads, *shift, &dsh);
                    }
                }
                Op::RowMul { x, gate } => {
                    let tx = self.value(*x);
                    let d = cols_of(tx);
                    let gv = self.value(*gate).data();
                    if self.ng(*x) {
                        let mut dx = g.clone();
                        for row in dx.chunks_mut(d) {
                            for j in 0..d {
                                row[j] *= gv[j];
                            }
                        }
                        self.acc(&mut grads, *x, &dx);
                    }
                    if self.ng(*gate) {
                        let mut dg = vec![0.0; d];
                        for (grow, xrow) in g.chunks(d).zip(tx.data().chunks(d)) {
                            for j in 0..d {
                                dg[j] += grow[j] * xrow[j];
                            }
                        }
                        self.acc(&mut grads, *gate, &dg);
                    }
                }
                Op::SliceCols { x, start, len } => {
                    let tx = self.value(*x);
                    let d = cols_of(tx);
                    let rows = rows_of(tx);
                    let mut dx = vec![0.0; tx.len()];
                    for r in 0..rows {
                        dx[r * d + start..r * d + start + len]
                            .copy_from_slice(&g[r * len..(r + 1) * len]);
                    }
                    self.acc(&mut grads, *x, &dx);
                }
                Op::ConcatCols(parts) => {
                    let rows = rows_of(&node.value);
                    let total = cols_of(&node.value);
                    let mut offset = 0;
                    for &p in parts {
                        let d = cols_of(self.value(p));
                        if self.ng(p) {
                            let mut dp = vec![0.0; rows * d];
                            for r in 0..rows {
                                dp[r * d..(r + 1) * d]
                                    .copy_from_slice(&g[r * total + offset..r * total + offset + d]);
                            }
                            self.acc(&mut grads, p, &dp);
                        }
                        offset += d;
                    }
                }
                Op::Softmax(x) => {
                    let y = node.value.data();
                    let d = cols_of(&node.value);
                    let mut dx = vec![0.0; y.len()];
                    for ((dxrow, yrow), grow) in
                        dx.chunks_mut(d).zip(y.chunks(d)).zip(g.chunks(d))
                    {
                        let dot: f64 = yrow.iter().zip(grow.iter()).map(|(y, g)| y * g).sum();
                        for j in 0..d {
                            dxrow[j] = yrow[j] * (grow[j] - dot);
                        }
                    }
                    self.acc(&mut grads, *x, &dx);
                }
                Op::LayerNorm { x, eps } => {
                    let tx = self.value(*x);
                    let d = cols_of(tx);
                    let y = node.value.data();
                    let mut dx = vec![0.0; tx.len()];
                    for (((dxrow, yrow), grow), xrow) in dx
                        .chunks_mut(d)
                        .zip(y.chunks(d))
                        .zip(g.chunks(d))
                        .zip(tx.data().chunks(d))
                    {
                        let mean = xrow.iter().sum::<f64>() / d as f64;
                        let var =
                            xrow.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                        let inv = 1.0 / (var + eps).sqrt();
                        let g_mean = grow.iter().sum::<f64>() / d as f64;
                        let gy_mean =
                            grow.iter().zip(yrow.iter()).map(|(g, y)| g * y).sum::<f64>()
                                / d as f64;
                        for j in 0..d {
                            dxrow[j] = inv * (grow[j] - g_mean - yrow[j] * gy_mean);
                        }
                    }
                    self.acc(&mut grads, *x, &dx);
                }
                Op::Silu(x) => {
                    let tx = self.value(*x);
                    let dx: Vec<f64> = g
                        .iter()
                        .zip(tx.data().iter())
                        .map(|(g, &a)| {
                            let s = sigmoid(a);
                            g * s * (1.0 + a * (1.0 - s))
                        })
                        .collect();
                    self.acc(&mut grads, *x, &dx);
                }
                Op::GeluTanh(x) => {
                    let tx = self.value(*x);
                    let dx: Vec<f64> = g
                        .iter()
                        .zip(tx.data().iter())
                        .map(|(g, &a)| g * gelu_tanh_grad(a))
                        .collect();
                    self.acc(&mut grads, *x, &dx);
                }
                Op::Exp(x) => {
                    let y = node.value.data();
                    let dx: Vec<f64> = g.iter().zip(y.iter()).map(|(g, y)| g * y).collect();
                    self.acc(&mut grads, *x, &dx);
                }
                Op::Tanh(x) => {
                    let y = node.value.data();
                    let dx: Vec<f64> =
                        g.iter().zip(y.iter()).map(|(g, y)| g * (1.0 - y * y)).collect();
                    self.acc(&mut grads, *x, &dx);
                }
                Op::MeanAll(x) => {
                    let n = self.value(*x).len();
                    let gv = g[0] / n as f64;
                    let dx = vec![gv; n];
                    self.acc(&mut grads, *x, &dx);
                }
                Op::AddFactorizedPos { x, pt, ph, pw, grid } => {
                    let (nt, nh, nw) = *grid;
                    let d = cols_of(&node.value);
                    if self.ng(*x) {
                        self.acc(&mut grads, *x, &g);
                    }
                    let mut dpt = vec![0.0; nt * d];
                    let mut dph = vec![0.0; nh * d];
                    let mut dpw = vec![0.0; nw * d];
                    let mut n = 0;
                    for t in 0..nt {
                        for h in 0..nh {
                            for w in 0..nw {
                                let grow = &g[n * d..(n + 1) * d];
                                for j in 0..d {
                                    dpt[t * d + j] += grow[j];
                                    dph[h * d + j] += grow[j];
                                    dpw[w * d + j] += grow[j];
                                }
                                n += 1;
                            }
                        }
                    }
                    if self.ng(*pt) {
                        self.acc(&mut grads, *pt, &dpt);
                    }
                    if self.ng(*ph) {
                        self.acc(&mut grads, *ph, &dph);
                    }
                    if self.ng(*pw) {
                        self.acc(&mut grads, *pw, &dpw);
                    }
                }
                Op::Conv3d { x, w, b, spec, dims } => {
                    let (t, h, wd) = *dims;
                    let (dx, dw, db) = conv3d_backward(
                        self.value(*x).data(),
                        self.value(*w).data(),
                        &g,
                        spec,
                        t,
                        h,
                        wd,
                    );
                    if self.ng(*x) {
                        self.acc(&mut grads, *x, &dx);
                    }
                    if self.ng(*w) {
                        self.acc(&mut grads, *w, &dw);
                    }
                    if self.ng(*b) {
                        self.acc(&mut grads, *b, &db);
                    }
                }
                Op::UpSpatial2(x) => {
                    let tx = self.value(*x);
                    let [t, h, w, c] = [tx.shape()[0], tx.shape()[1], tx.shape()[2], tx.shape()[3]];
                    let dx = upsample_spatial2_backward(&g, t, h, w, c);
                    self.acc(&mut grads, *x, &dx);
                }
                Op::UpTemporal { x, factor } => {
                    let tx = self.value(*x);
                    let [t, h, w, c] = [tx.shape()[0], tx.shape()[1], tx.shape()[2], tx.shape()[3]];
                    let dx = upsample_temporal_causal_backward(&g, t, h * w * c, *factor);
                    self.acc(&mut grads, *x, &dx);
                }
                Op::Reshape(x) => self.acc(&mut grads, *x, &g),
            }
        }
        out
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], id: NodeId, contribution: &[f64]) {
        if !self.ng(id) {
            return;
        }
        match &mut grads[id.0] {
            Some(existing) => {
                for (e, c) in existing.iter_mut().zip(contribution.iter()) {
                    *e += c;
                }
            }
            slot @ None => *slot = Some(contribution.to_vec()),
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/π)
const GELU_A: f64 = 0.044715;

fn gelu_tanh_val(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_tanh_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}
