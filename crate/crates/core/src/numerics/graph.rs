//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends one node to the [`Graph`]; a node's inputs always
//! have smaller indices, so walking the tape backwards from the root is a
//! valid reverse topological order and visits each node once.

use rand::Rng;

use super::kernels::{gemm_acc, Layout};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::par;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Softmax {
        x: Var,
        axis: usize,
    },
    LogSoftmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Relu(Var),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Sum(Var),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Reshape(a)
            | Op::Permute(a, _)
            | Op::Relu(a)
            | Op::Sum(a)
            | Op::Softmax { x: a, .. }
            | Op::LogSoftmax { x: a, .. } => vec![*a],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::Gather { table, .. } => vec![*table],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of executed operations.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    backward_visits: usize,
}

// ---------------------------------------------------------------------------
// broadcasting

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Maps a flat index of the broadcast output onto a flat index of `src`.
enum BroadcastMap {
    Same,
    Modulo(usize),
    Table(Vec<usize>),
}

impl BroadcastMap {
    fn new(src: &[usize], out: &[usize]) -> Self {
        if src == out {
            return BroadcastMap::Same;
        }
        let src_n: usize = src.iter().product();
        let out_n: usize = out.iter().product();
        // src is a trailing block of out (bias-style broadcast)
        let pad = out.len() - src.len();
        let trailing = src
            .iter()
            .zip(&out[pad..])
            .skip_while(|(s, _)| **s == 1)
            .all(|(s, o)| s == o);
        if trailing {
            return BroadcastMap::Modulo(src_n);
        }
        let mut strides = vec![0usize; out.len()];
        let mut acc = 1;
        for i in (0..src.len()).rev() {
            strides[i + pad] = if src[i] == 1 { 0 } else { acc };
            acc *= src[i];
        }
        let mut table = Vec::with_capacity(out_n);
        let mut idx = vec![0usize; out.len()];
        for _ in 0..out_n {
            table.push(idx.iter().zip(&strides).map(|(i, s)| i * s).sum());
            for d in (0..out.len()).rev() {
                idx[d] += 1;
                if idx[d] < out[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        BroadcastMap::Table(table)
    }

    #[inline]
    fn get(&self, i: usize) -> usize {
        match self {
            BroadcastMap::Same => i,
            BroadcastMap::Modulo(n) => i % n,
            BroadcastMap::Table(t) => t[i],
        }
    }
}

fn permuted_source_index(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n: usize = shape.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    for _ in 0..n {
        map.push(idx.iter().zip(&strides).map(|(i, s)| i * s).sum());
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    map
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn softmax_slices(x: &[f64], shape: &[usize], axis: usize, log: bool) -> Vec<f64> {
    let (outer, len, inner) = split_axis(shape, axis);
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * len * inner + j * inner + i;
            let max = (0..len).map(|j| x[at(j)]).fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = (0..len).map(|j| (x[at(j)] - max).exp()).sum();
            if log {
                let lse = max + denom.ln();
                for j in 0..len {
                    out[at(j)] = x[at(j)] - lse;
                }
            } else {
                for j in 0..len {
                    out[at(j)] = (x[at(j)] - max).exp() / denom;
                }
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes (leaves included).
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Nodes visited by the most recent backward pass.
    pub fn backward_visits(&self) -> usize {
        self.backward_visits
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    // -- elementwise -------------------------------------------------------

    fn binary(&self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let out_shape = broadcast_shape(sa, sb).ok_or_else(|| {
            Error::Dimension(format!("{name}: cannot broadcast {sa:?} with {sb:?}"))
        })?;
        let ma = BroadcastMap::new(sa, &out_shape);
        let mb = BroadcastMap::new(sb, &out_shape);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let n: usize = out_shape.iter().product();
        let data = (0..n).map(|i| f(da[ma.get(i)], db[mb.get(i)])).collect();
        Ok(Tensor::from_parts(out_shape, data))
    }

    /// Broadcasting addition.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b)))
    }

    /// Broadcasting elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).map(|v| v * c);
        self.push(t, Op::Scale(a, c))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|v| v.max(0.0));
        self.push(t, Op::Relu(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let t = Tensor::scalar(self.value(a).sum());
        self.push(t, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    // -- shape ---------------------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).reshape(shape)?;
        Ok(self.push(t, Op::Reshape(a)))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&x| x >= shape.len() || std::mem::replace(&mut seen[x], true)) {
            return Err(Error::Dimension(format!(
                "permute: {axes:?} is not a permutation of the axes of {shape:?}"
            )));
        }
        let map = permuted_source_index(&shape, axes);
        let src = self.value(a).data();
        let data = map.iter().map(|&i| src[i]).collect();
        let out_shape = axes.iter().map(|&x| shape[x]).collect();
        Ok(self.push(Tensor::from_parts(out_shape, data), Op::Permute(a, axes.to_vec())))
    }

    /// Swaps the last two axes.
    pub fn transpose_last(&mut self, a: Var) -> Result<Var> {
        let r = self.shape(a).len();
        if r < 2 {
            return Err(Error::Dimension("transpose needs rank >= 2".into()));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(a, &axes)
    }

    // -- products --------------------------------------------------------------

    /// Batched matrix product `[…,m,k] · […,k,n]` with broadcast leading dims.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let mismatch = || Error::Dimension(format!("matmul: {sa:?} is not conformable with {sb:?}"));
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let k = sa[sa.len() - 1];
        if sb[sb.len() - 2] != k {
            return Err(mismatch());
        }
        let n = sb[sb.len() - 1];
        let (av, bv) = (self.value(a).data(), self.value(b).data());

        if sb.len() == 2 {
            let m = av.len() / k;
            let mut out = vec![0.0; m * n];
            gemm_acc(Layout::NN, av, bv, m, k, n, &mut out, par::worth_splitting(m * n * k / 4));
            let mut shape = sa[..sa.len() - 1].to_vec();
            shape.push(n);
            return Ok(self.push(Tensor::from_parts(shape, out), Op::MatMul(a, b)));
        }

        let m = sa[sa.len() - 2];
        let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        let batch = broadcast_shape(ba, bb).ok_or_else(mismatch)?;
        let nbatch: usize = batch.iter().product();
        let (ma, mb) = (BroadcastMap::new(ba, &batch), BroadcastMap::new(bb, &batch));
        let mut out = vec![0.0; nbatch * m * n];
        let parallel = nbatch > 1 && par::worth_splitting(nbatch * m * n * k / 4);
        par::for_each_chunk(&mut out, m * n, parallel, |i, chunk| {
            let (ia, ib) = (ma.get(i), mb.get(i));
            gemm_acc(
                Layout::NN,
                &av[ia * m * k..(ia + 1) * m * k],
                &bv[ib * k * n..(ib + 1) * k * n],
                m,
                k,
                n,
                chunk,
                false,
            );
        });
        let mut shape = batch;
        shape.extend([m, n]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::MatMul(a, b)))
    }

    // -- normalisation -----------------------------------------------------------

    /// Softmax along `axis`, computed with max-subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Dimension(format!("softmax: axis {axis} out of range for {shape:?}")));
        }
        let data = softmax_slices(self.value(x).data(), &shape, axis, false);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Softmax { x, axis }))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Dimension(format!("log_softmax: axis {axis} out of range for {shape:?}")));
        }
        let data = softmax_slices(self.value(x).data(), &shape, axis, true);
        Ok(self.push(Tensor::from_parts(shape, data), Op::LogSoftmax { x, axis }))
    }

    /// Layer normalisation over the last dimension.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().expect("rank >= 1");
        for (v, what) in [(gain, "gain"), (bias, "bias")] {
            if self.value(v).len() != d {
                return Err(Error::Dimension(format!(
                    "layer_norm: {what} {:?} does not match last dim of {shape:?}",
                    self.shape(v)
                )));
            }
        }
        let xv = self.value(x).data();
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = xv.len() / d;
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = g[j] * h + b[j];
            }
        }
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        ))
    }

    // -- lookup ------------------------------------------------------------------------

    /// Rows of a `[V, D]` table; output shape is `ids_shape ++ [D]`.
    pub fn gather(&mut self, table: Var, ids: &[usize], ids_shape: &[usize]) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 {
            return Err(Error::Dimension(format!("gather: table must be rank 2, got {ts:?}")));
        }
        if ids_shape.iter().product::<usize>() != ids.len() {
            return Err(Error::Dimension(format!(
                "gather: {} ids do not fill shape {ids_shape:?}",
                ids.len()
            )));
        }
        let (v, d) = (ts[0], ts[1]);
        if let Some(bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Vocabulary(format!("id {bad} out of range for {v} rows")));
        }
        let tv = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let mut shape = ids_shape.to_vec();
        shape.push(d);
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    // -- backward --------------------------------------------------------------------

    /// Reverse pass from a scalar root with seed gradient 1.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        self.backward_scaled(root, 1.0)
    }

    /// Reverse pass from a scalar root with seed gradient `seed`. Gradients
    /// accumulate onto any already present.
    pub fn backward_scaled(&mut self, root: Var, seed: f64) -> Result<()> {
        if self.value(root).len() != 1 {
            return Err(Error::Dimension(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(root)
            )));
        }
        let seed_t = Tensor::full(self.shape(root), seed);
        self.accumulate(root, seed_t);
        self.backward_visits = 0;
        for idx in (0..=root.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(grad) = self.nodes[idx].grad.take() else {
                continue;
            };
            self.backward_visits += 1;
            let contributions = self.local_gradients(idx, &grad);
            self.nodes[idx].grad = Some(grad);
            for (v, g) in contributions {
                self.accumulate(v, g);
            }
        }
        Ok(())
    }

    /// Drops all stored gradients.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn accumulate(&mut self, v: Var, g: Tensor) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(existing) => {
                for (e, x) in existing.data_mut().iter_mut().zip(g.data()) {
                    *e += x;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn reduce_broadcast(&self, g: &Tensor, to: Var, factor: Option<(Var, &[usize])>) -> Tensor {
        let target = self.shape(to).to_vec();
        let map = BroadcastMap::new(&target, g.shape());
        let mut out = vec![0.0; target.iter().product()];
        match factor {
            None => {
                for (i, gv) in g.data().iter().enumerate() {
                    out[map.get(i)] += gv;
                }
            }
            Some((other, other_shape)) => {
                let om = BroadcastMap::new(other_shape, g.shape());
                let ov = self.value(other).data();
                for (i, gv) in g.data().iter().enumerate() {
                    out[map.get(i)] += gv * ov[om.get(i)];
                }
            }
        }
        Tensor::from_parts(target, out)
    }

    fn local_gradients(&self, idx: usize, g: &Tensor) -> Vec<(Var, Tensor)> {
        let node = &self.nodes[idx];
        let gd = g.data();
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.wants(v) {
                        out.push((v, self.reduce_broadcast(g, v, None)));
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    out.push((*a, self.reduce_broadcast(g, *a, Some((*b, self.shape(*b))))));
                }
                if self.wants(*b) {
                    out.push((*b, self.reduce_broadcast(g, *b, Some((*a, self.shape(*a))))));
                }
            }
            Op::Scale(a, c) => out.push((*a, g.map(|v| v * c))),
            Op::Relu(a) => {
                let x = self.value(*a).data();
                let data = gd.iter().zip(x).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect();
                out.push((*a, Tensor::from_parts(x_shape(self, *a), data)));
            }
            Op::Sum(a) => out.push((*a, Tensor::full(self.shape(*a), gd[0]))),
            Op::Reshape(a) => out.push((*a, Tensor::from_parts(x_shape(self, *a), gd.to_vec()))),
            Op::Permute(a, axes) => {
                let map = permuted_source_index(self.shape(*a), axes);
                let mut data = vec![0.0; gd.len()];
                for (o, &src) in map.iter().enumerate() {
                    data[src] = gd[o];
                }
                out.push((*a, Tensor::from_parts(x_shape(self, *a), data)));
            }
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let (outer, len, inner) = split_axis(node.value.shape(), *axis);
                let mut data = vec![0.0; gd.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| o * len * inner + j * inner + i;
                        let dot: f64 = (0..len).map(|j| gd[at(j)] * y[at(j)]).sum();
                        for j in 0..len {
                            data[at(j)] = y[at(j)] * (gd[at(j)] - dot);
                        }
                    }
                }
                out.push((*x, Tensor::from_parts(x_shape(self, *x), data)));
            }
            Op::LogSoftmax { x, axis } => {
                let y = node.value.data();
                let (outer, len, inner) = split_axis(node.value.shape(), *axis);
                let mut data = vec![0.0; gd.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| o * len * inner + j * inner + i;
                        let total: f64 = (0..len).map(|j| gd[at(j)]).sum();
                        for j in 0..len {
                            data[at(j)] = gd[at(j)] - y[at(j)].exp() * total;
                        }
                    }
                }
                out.push((*x, Tensor::from_parts(x_shape(self, *x), data)));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = self.value(*gain).len();
                let gv = self.value(*gain).data();
                let rows = gd.len() / d;
                let mut dx = vec![0.0; gd.len()];
                let mut dgain = vec![0.0; d];
                let mut dbias = vec![0.0; d];
                for r in 0..rows {
                    let (gr, hr) = (&gd[r * d..(r + 1) * d], &xhat[r * d..(r + 1) * d]);
                    let mut sum_dh = 0.0;
                    let mut sum_dh_h = 0.0;
                    for j in 0..d {
                        let dh = gr[j] * gv[j];
                        sum_dh += dh;
                        sum_dh_h += dh * hr[j];
                        dgain[j] += gr[j] * hr[j];
                        dbias[j] += gr[j];
                    }
                    let scale = inv_std[r] / d as f64;
                    for j in 0..d {
                        let dh = gr[j] * gv[j];
                        dx[r * d + j] = scale * (d as f64 * dh - sum_dh - hr[j] * sum_dh_h);
                    }
                }
                if self.wants(*x) {
                    out.push((*x, Tensor::from_parts(x_shape(self, *x), dx)));
                }
                if self.wants(*gain) {
                    out.push((*gain, Tensor::from_parts(x_shape(self, *gain), dgain)));
                }
                if self.wants(*bias) {
                    out.push((*bias, Tensor::from_parts(x_shape(self, *bias), dbias)));
                }
            }
            Op::Gather { table, ids } => {
                let ts = self.shape(*table);
                let d = ts[1];
                let mut data = vec![0.0; ts[0] * d];
                for (r, &id) in ids.iter().enumerate() {
                    for (t, s) in data[id * d..(id + 1) * d].iter_mut().zip(&gd[r * d..(r + 1) * d]) {
                        *t += s;
                    }
                }
                out.push((*table, Tensor::from_parts(ts.to_vec(), data)));
            }
            Op::MatMul(a, b) => out.extend(self.matmul_backward(*a, *b, g)),
        }
        out
    }

    fn matmul_backward(&self, a: Var, b: Var, g: &Tensor) -> Vec<(Var, Tensor)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (av, bv, gd) = (self.value(a).data(), self.value(b).data(), g.data());
        let k = sa[sa.len() - 1];
        let n = sb[sb.len() - 1];
        let mut out = Vec::new();

        if sb.len() == 2 {
            let m = av.len() / k;
            let parallel = par::worth_splitting(m * n * k / 4);
            if self.wants(a) {
                let mut da = vec![0.0; av.len()];
                gemm_acc(Layout::NT, gd, bv, m, n, k, &mut da, parallel);
                out.push((a, Tensor::from_parts(sa.to_vec(), da)));
            }
            if self.wants(b) {
                let mut db = vec![0.0; bv.len()];
                gemm_acc(Layout::TN, av, gd, k, m, n, &mut db, parallel);
                out.push((b, Tensor::from_parts(sb.to_vec(), db)));
            }
            return out;
        }

        let m = sa[sa.len() - 2];
        let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        let batch = broadcast_shape(ba, bb).expect("validated in forward");
        let nbatch: usize = batch.iter().product();
        let (ma, mb) = (BroadcastMap::new(ba, &batch), BroadcastMap::new(bb, &batch));
        let parallel = nbatch > 1 && par::worth_splitting(nbatch * m * n * k / 4);
        let g_at = |i: usize| &gd[i * m * n..(i + 1) * m * n];

        if self.wants(a) {
            let mut da = vec![0.0; av.len()];
            if ba.iter().product::<usize>() == nbatch {
                // one output batch per chunk of `da`
                par::for_each_chunk(&mut da, m * k, parallel, |i, chunk| {
                    let ib = mb.get(i);
                    gemm_acc(Layout::NT, g_at(i), &bv[ib * k * n..(ib + 1) * k * n], m, n, k, chunk, false);
                });
            } else {
                for i in 0..nbatch {
                    let (ia, ib) = (ma.get(i), mb.get(i));
                    gemm_acc(
                        Layout::NT,
                        g_at(i),
                        &bv[ib * k * n..(ib + 1) * k * n],
                        m,
                        n,
                        k,
                        &mut da[ia * m * k..(ia + 1) * m * k],
                        false,
                    );
                }
            }
            out.push((a, Tensor::from_parts(sa.to_vec(), da)));
        }
        if self.wants(b) {
            let mut db = vec![0.0; bv.len()];
            if bb.iter().product::<usize>() == nbatch {
                par::for_each_chunk(&mut db, k * n, parallel, |i, chunk| {
                    let ia = ma.get(i);
                    gemm_acc(Layout::TN, &av[ia * m * k..(ia + 1) * m * k], g_at(i), k, m, n, chunk, false);
                });
            } else {
                for i in 0..nbatch {
                    let (ia, ib) = (ma.get(i), mb.get(i));
                    gemm_acc(
                        Layout::TN,
                        &av[ia * m * k..(ia + 1) * m * k],
                        g_at(i),
                        k,
                        m,
                        n,
                        &mut db[ib * k * n..(ib + 1) * k * n],
                        false,
                    );
                }
            }
            out.push((b, Tensor::from_parts(sb.to_vec(), db)));
        }
        out
    }
}

fn x_shape(g: &Graph, v: Var) -> Vec<usize> {
    g.shape(v).to_vec()
}

/// Inverted dropout. Identity when `training` is false or `p == 0`.
pub fn dropout<R: Rng + ?Sized>(g: &mut Graph, x: Var, p: f64, training: bool, rng: &mut R) -> Result<Var> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Config(format!("dropout probability {p} outside [0, 1)")));
    }
    if !training || p == 0.0 {
        return Ok(x);
    }
    let keep = 1.0 / (1.0 - p);
    let shape = g.shape(x).to_vec();
    let n: usize = shape.iter().product();
    let mask = (0..n)
        .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
        .collect();
    let mask = g.constant(Tensor::from_parts(shape, mask));
    g.mul(x, mask)
}

/// `softmax(q·kᵀ/√d_h + mask)·v` over the last two axes of each input.
pub fn scaled_dot_attention(g: &mut Graph, q: Var, k: Var, v: Var, mask: Option<Var>) -> Result<Var> {
    let (sq, sk) = (g.shape(q).to_vec(), g.shape(k).to_vec());
    let dh = *sq.last().expect("rank >= 1");
    if sk.last() != Some(&dh) {
        return Err(Error::Dimension(format!(
            "attention: query {sq:?} and key {sk:?} disagree on head dimension"
        )));
    }
    let kt = g.transpose_last(k)?;
    let scores = g.matmul(q, kt)?;
    let mut scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
    if let Some(m) = mask {
        scores = g.add(scores, m)?;
    }
    let rank = g.shape(scores).len();
    let weights = g.softmax(scores, rank - 1)?;
    g.matmul(weights, v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_dot() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let i = g.constant(t(&[2, 2], &[1., 0., 0., 1.]));
        let out = g.matmul(a, i).unwrap();
        assert_eq!(g.value(out).data(), &[1., 2., 3., 4.]);

        let r = g.constant(t(&[1, 2], &[1., 2.]));
        let c = g.constant(t(&[2, 1], &[3., 4.]));
        let out = g.matmul(r, c).unwrap();
        assert_eq!(g.value(out).data(), &[11.]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("is not conformable"), "{err}");
    }

    #[test]
    fn broadcast_add_reduces_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::ones(&[2, 3, 4]));
        let b = g.param(Tensor::zeros(&[4]));
        let m = g.param(Tensor::zeros(&[2, 1, 4]));
        let y = g.add(x, b).unwrap();
        let y = g.add(y, m).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(b).unwrap().data(), &[6.0; 4]);
        assert_eq!(g.grad(m).unwrap().data(), &[3.0; 8]);
        let bad = g.param(Tensor::zeros(&[3]));
        assert!(g.add(x, bad).is_err());
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2], &[0.0, 0.0]));
        let y = g.softmax(x, 0).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);

        let x = g.constant(t(&[3], &[1., 2., 3.]));
        let y = g.softmax(x, 0).unwrap();
        for (got, want) in g.value(y).data().iter().zip([0.09003, 0.24473, 0.66524]) {
            assert!((got - want).abs() < 1e-5);
        }

        let x = g.constant(t(&[2], &[0.0, -1e32]));
        let y = g.softmax(x, 0).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 0.0]);

        let x = g.constant(t(&[2], &[0.0, f64::NEG_INFINITY]));
        let y = g.softmax(x, 0).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 0.0]);
    }

    #[test]
    fn softmax_along_inner_axis() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 2], &[0.0, 5.0, 0.0, 5.0]));
        let y = g.softmax(x, 0).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn layer_norm_examples() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2], &[1., 3.]));
        let gain = g.constant(Tensor::ones(&[2]));
        let bias = g.constant(Tensor::zeros(&[2]));
        let y = g.layer_norm(x, gain, bias, 0.0).unwrap();
        assert_eq!(g.value(y).data(), &[-1.0, 1.0]);

        let x = g.constant(Tensor::full(&[1, 2], 7.0));
        let y = g.layer_norm(x, gain, bias, 1e-6).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0]);
    }

    #[test]
    fn attention_identity_and_mask() {
        let mut g = Graph::new();
        let q = g.constant(t(&[1, 2], &[0.3, -0.7]));
        let v = g.constant(t(&[1, 3], &[1., 2., 3.]));
        let out = scaled_dot_attention(&mut g, q, q, v, None).unwrap();
        assert_eq!(g.value(out).data(), &[1., 2., 3.]);

        let k = g.constant(t(&[2, 2], &[1., 0., 0., 1.]));
        let v = g.constant(t(&[2, 2], &[5., 6., 7., 8.]));
        let mask = g.constant(t(&[1, 2], &[0.0, -1e9]));
        let out = scaled_dot_attention(&mut g, q, k, v, Some(mask)).unwrap();
        assert_eq!(g.value(out).data(), &[5., 6.]);
    }

    #[test]
    fn dropout_identities_and_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::new();
        let x = g.param(t(&[3], &[1., -2., 3.]));
        assert_eq!(dropout(&mut g, x, 0.0, true, &mut rng).unwrap(), x);
        assert_eq!(dropout(&mut g, x, 0.9, false, &mut rng).unwrap(), x);
        assert!(matches!(dropout(&mut g, x, 1.0, true, &mut rng), Err(Error::Config(_))));
        assert!(dropout(&mut g, x, -0.1, true, &mut rng).is_err());
    }

    #[test]
    fn dropout_monte_carlo_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut g = Graph::new();
        let n = 100_000;
        let x = g.constant(Tensor::ones(&[n]));
        let y = dropout(&mut g, x, 0.5, true, &mut rng).unwrap();
        let v = g.value(y).data();
        let mean = v.iter().sum::<f64>() / n as f64;
        let zeros = v.iter().filter(|&&x| x == 0.0).count() as f64 / n as f64;
        assert!((mean - 1.0).abs() < 0.02, "mean {mean}");
        assert!((zeros - 0.5).abs() < 0.01, "zeros {zeros}");
    }

    #[test]
    fn backward_visits_each_node_once() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1., 2.]));
        let y = g.mul(x, x).unwrap();
        let z = g.add(y, x).unwrap();
        let s = g.sum(z);
        g.backward(s).unwrap();
        assert_eq!(g.backward_visits(), 4);
        // d/dx (x^2 + x) = 2x + 1
        assert_eq!(g.grad(x).unwrap().data(), &[3., 5.]);
    }

    #[test]
    fn gather_rejects_out_of_range() {
        let mut g = Graph::new();
        let e = g.param(Tensor::zeros(&[3, 2]));
        assert!(matches!(g.gather(e, &[3], &[1]), Err(Error::Vocabulary(_))));
        let r = g.gather(e, &[0, 2, 2], &[3]).unwrap();
        let s = g.sum(r);
        g.backward(s).unwrap();
        assert_eq!(g.grad(e).unwrap().data(), &[1., 1., 0., 0., 2., 2.]);
    }
}
