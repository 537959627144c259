//! Define-by-run reverse-mode differentiation.
//!
//! Every op appends a node holding its output value; node indices are a
//! topological order, so the backward sweep walks them in reverse.

use super::tensor::{gemm, gemm_nt, gemm_tn, Real, Tensor};
use super::NumericsError;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Row partition and masking for [`Tape::attention`].
///
/// Query and key rows are split into `blocks` equal consecutive groups and
/// attention only happens within a block. When group labels are supplied, a
/// query attends a key only if their labels are equal.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionLayout {
    pub heads: usize,
    pub blocks: usize,
    pub query_groups: Option<Vec<u32>>,
    pub key_groups: Option<Vec<u32>>,
}

impl AttentionLayout {
    pub fn dense(heads: usize) -> Self {
        Self {
            heads,
            blocks: 1,
            query_groups: None,
            key_groups: None,
        }
    }

    fn allowed(&self, qi: usize, kj: usize) -> bool {
        match (&self.query_groups, &self.key_groups) {
            (Some(qg), Some(kg)) => qg[qi] == kg[kj],
            _ => true,
        }
    }
}

enum Op<T: Real> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Softmax(Var),
    Gelu(Var),
    Softplus(Var),
    Abs(Var),
    Square(Var),
    SumAll(Var),
    SumLastDim(Var),
    Reshape(Var),
    Transpose(Var),
    GatherRows {
        x: Var,
        index: Vec<Option<usize>>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        layout: AttentionLayout,
        probs: Vec<T>,
    },
    Mean(Vec<Var>),
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recorded computation. Single-threaded; rebuild per step.
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> NumericsError {
    NumericsError::ShapeMismatch {
        op,
        left: a.to_vec(),
        right: b.to_vec(),
    }
}

fn gelu_parts<T: Real>(x: T) -> (T, T) {
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let a = T::of(0.044715);
    let half = T::of(0.5);
    let u = c * (x + a * x * x * x);
    let th = u.tanh();
    let y = half * x * (T::one() + th);
    let dy = half * (T::one() + th)
        + half * x * (T::one() - th * th) * c * (T::one() + T::of(3.0) * a * x * x);
    (y, dy)
}

fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var, NumericsError> {
        if let Some(index) = value.data().iter().position(|x| !x.is_finite()) {
            return Err(NumericsError::NonFinite {
                op: op_name(&op),
                index,
            });
        }
        let needs_grad = inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Differentiable input (a parameter).
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(mismatch("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), &[a, b])
    }

    fn zip_same(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>, NumericsError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(name, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor::from_parts(ta.shape().to_vec(), data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let out = self.zip_same("add", a, b, |x, y| x + y)?;
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let out = self.zip_same("sub", a, b, |x, y| x - y)?;
        self.push(out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let out = self.zip_same("mul", a, b, |x, y| x * y)?;
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    /// `x[.., C] + bias[C]` broadcast over leading axes.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var, NumericsError> {
        let c = self.value(x).last_dim();
        if self.value(bias).numel() != c {
            return Err(mismatch("add_row", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias).data().to_vec();
        let tx = self.value(x);
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(c) {
            for (o, &bv) in row.iter_mut().zip(&b) {
                *o += bv;
            }
        }
        let out = Tensor::from_parts(tx.shape().to_vec(), data);
        self.push(out, Op::AddRow(x, bias), &[x, bias])
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var, NumericsError> {
        let out = self.value(x).map(|v| v * s);
        self.push(out, Op::Scale(x, s), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, s: T) -> Result<Var, NumericsError> {
        let out = self.value(x).map(|v| v + s);
        self.push(out, Op::AddScalar(x), &[x])
    }

    /// Normalizes over the last axis, then applies `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var, NumericsError> {
        let c = self.value(x).last_dim();
        if self.value(gain).numel() != c || self.value(bias).numel() != c {
            return Err(mismatch("layer_norm", self.shape(x), self.shape(gain)));
        }
        let g = self.value(gain).data().to_vec();
        let b = self.value(bias).data().to_vec();
        let tx = self.value(x);
        let rows = tx.numel() / c.max(1);
        let eps = T::of(LAYER_NORM_EPS);
        let cn = T::of(c as f64);
        let mut xhat = vec![T::zero(); tx.numel()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); tx.numel()];
        for r in 0..rows {
            let row = &tx.data()[r * c..(r + 1) * c];
            let mean = row.iter().copied().sum::<T>() / cn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[r * c + j] = h;
                out[r * c + j] = h * g[j] + b[j];
            }
        }
        let out = Tensor::from_parts(tx.shape().to_vec(), out);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        )
    }

    /// Max-subtracted softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var, NumericsError> {
        let tx = self.value(x);
        let c = tx.last_dim();
        let mut out = tx.data().to_vec();
        for row in out.chunks_mut(c) {
            softmax_in_place(row);
        }
        let out = Tensor::from_parts(tx.shape().to_vec(), out);
        self.push(out, Op::Softmax(x), &[x])
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var, NumericsError> {
        let out = self.value(x).map(|v| gelu_parts(v).0);
        self.push(out, Op::Gelu(x), &[x])
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var, NumericsError> {
        let out = self.value(x).map(softplus);
        self.push(out, Op::Softplus(x), &[x])
    }

    pub fn abs(&mut self, x: Var) -> Result<Var, NumericsError> {
        let out = self.value(x).map(|v| v.abs());
        self.push(out, Op::Abs(x), &[x])
    }

    pub fn square(&mut self, x: Var) -> Result<Var, NumericsError> {
        let out = self.value(x).map(|v| v * v);
        self.push(out, Op::Square(x), &[x])
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var, NumericsError> {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::SumAll(x), &[x])
    }

    /// Sums the last axis away; a rank-1 input yields shape `[1]`.
    pub fn sum_last_dim(&mut self, x: Var) -> Result<Var, NumericsError> {
        let tx = self.value(x);
        let c = tx.last_dim();
        let data: Vec<T> = tx.data().chunks(c).map(|r| r.iter().copied().sum()).collect();
        let mut shape = tx.shape()[..tx.rank().saturating_sub(1)].to_vec();
        if shape.is_empty() {
            shape.push(1);
        }
        self.push(Tensor::from_parts(shape, data), Op::SumLastDim(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, NumericsError> {
        let out = self.value(x).reshape(shape)?;
        self.push(out, Op::Reshape(x), &[x])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var, NumericsError> {
        let (r, c) = self.value(x).dims2()?;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        self.push(Tensor::from_parts(vec![c, r], out), Op::Transpose(x), &[x])
    }

    /// Row gather; `None` produces a zero row.
    pub fn gather_rows(&mut self, x: Var, index: Vec<Option<usize>>) -> Result<Var, NumericsError> {
        let (rows, c) = self.value(x).dims2()?;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); index.len() * c];
        for (o, i) in index.iter().enumerate() {
            if let Some(i) = *i {
                if i >= rows {
                    return Err(NumericsError::IndexOutOfRange {
                        op: "gather_rows",
                        index: i,
                        len: rows,
                    });
                }
                out[o * c..(o + 1) * c].copy_from_slice(&src[i * c..(i + 1) * c]);
            }
        }
        let out = Tensor::from_parts(vec![index.len(), c], out);
        self.push(out, Op::GatherRows { x, index }, &[x])
    }

    /// Elementwise mean of equally shaped tensors.
    pub fn mean(&mut self, xs: &[Var]) -> Result<Var, NumericsError> {
        let first = *xs.first().ok_or(NumericsError::Empty { op: "mean" })?;
        let mut acc = self.value(first).clone();
        for &x in &xs[1..] {
            let t = self.value(x);
            if t.shape() != acc.shape() {
                return Err(mismatch("mean", acc.shape(), t.shape()));
            }
            acc.add_assign(t);
        }
        let inv = T::one() / T::of(xs.len() as f64);
        let out = acc.map(|v| v * inv);
        self.push(out, Op::Mean(xs.to_vec()), xs)
    }

    /// Multi-head scaled dot-product attention, `softmax(QKᵀ/√d)V` per head.
    ///
    /// `q: [Nq, C]`, `k, v: [Nk, C]`; the head split is over channels.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        layout: AttentionLayout,
    ) -> Result<Var, NumericsError> {
        let (nq, c) = self.value(q).dims2()?;
        let (nk, ck) = self.value(k).dims2()?;
        let (nv, cv) = self.value(v).dims2()?;
        if ck != c || cv != c || nv != nk {
            return Err(mismatch("attention", self.shape(q), self.shape(k)));
        }
        if layout.heads == 0 || c % layout.heads != 0 {
            return Err(NumericsError::Config(format!(
                "channels {c} not divisible by {} heads",
                layout.heads
            )));
        }
        if layout.blocks == 0 || nq % layout.blocks != 0 || nk % layout.blocks != 0 {
            return Err(NumericsError::Config(format!(
                "rows ({nq}, {nk}) not divisible into {} blocks",
                layout.blocks
            )));
        }
        if let (Some(qg), Some(kg)) = (&layout.query_groups, &layout.key_groups) {
            if qg.len() != nq || kg.len() != nk {
                return Err(NumericsError::Config("group label length".into()));
            }
        }
        let heads = layout.heads;
        let d = c / heads;
        let bq = nq / layout.blocks;
        let bk = nk / layout.blocks;
        let scale = T::one() / T::of(d as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![T::zero(); layout.blocks * heads * bq * bk];
        let mut out = vec![T::zero(); nq * c];
        let mut row = vec![T::zero(); bk];
        for b in 0..layout.blocks {
            for h in 0..heads {
                let off = h * d;
                for i in 0..bq {
                    let qi = b * bq + i;
                    let qrow = &qd[qi * c + off..qi * c + off + d];
                    let mut any = false;
                    for (j, s) in row.iter_mut().enumerate() {
                        let kj = b * bk + j;
                        if layout.allowed(qi, kj) {
                            let krow = &kd[kj * c + off..kj * c + off + d];
                            let dot: T = qrow.iter().zip(krow).map(|(&x, &y)| x * y).sum();
                            *s = dot * scale;
                            any = true;
                        } else {
                            *s = T::neg_infinity();
                        }
                    }
                    let p = &mut probs[((b * heads + h) * bq + i) * bk..][..bk];
                    if any {
                        p.copy_from_slice(&row);
                        softmax_in_place(p);
                    }
                    let orow = &mut out[qi * c + off..qi * c + off + d];
                    for (j, &pj) in p.iter().enumerate() {
                        if pj == T::zero() {
                            continue;
                        }
                        let kj = b * bk + j;
                        let vrow = &vd[kj * c + off..kj * c + off + d];
                        for (o, &vv) in orow.iter_mut().zip(vrow) {
                            *o += pj * vv;
                        }
                    }
                }
            }
        }
        let out = Tensor::from_parts(vec![nq, c], out);
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                layout,
                probs,
            },
            &[q, k, v],
        )
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, NumericsError> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(NumericsError::NonScalarLoss {
                shape: lv.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(lv.shape()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                if self.needs(*a) {
                    let mut da = vec![T::zero(); m * k];
                    gemm_nt(gd, tb.data(), &mut da, m, n, k);
                    self.accumulate(grads, *a, Tensor::from_parts(vec![m, k], da));
                }
                if self.needs(*b) {
                    let mut db = vec![T::zero(); k * n];
                    gemm_tn(ta.data(), gd, &mut db, m, k, n);
                    self.accumulate(grads, *b, Tensor::from_parts(vec![k, n], db));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    let d = gd.iter().zip(tb.data()).map(|(&x, &y)| x * y).collect();
                    self.accumulate(grads, *a, Tensor::from_parts(ta.shape().to_vec(), d));
                }
                if self.needs(*b) {
                    let d = gd.iter().zip(ta.data()).map(|(&x, &y)| x * y).collect();
                    self.accumulate(grads, *b, Tensor::from_parts(tb.shape().to_vec(), d));
                }
            }
            Op::AddRow(x, bias) => {
                self.accumulate(grads, *x, g.clone());
                if self.needs(*bias) {
                    let c = g.last_dim();
                    let mut db = vec![T::zero(); c];
                    for row in gd.chunks(c) {
                        for (o, &v) in db.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    let shape = self.shape(*bias).to_vec();
                    self.accumulate(grads, *bias, Tensor::from_parts(shape, db));
                }
            }
            Op::Scale(x, s) => {
                let s = *s;
                self.accumulate(grads, *x, g.map(|v| v * s));
            }
            Op::AddScalar(x) => self.accumulate(grads, *x, g.clone()),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let c = g.last_dim();
                let gainv = self.value(*gain).data();
                let cn = T::of(c as f64);
                if self.needs(*x) {
                    let mut dx = vec![T::zero(); gd.len()];
                    for (r, &rs) in rstd.iter().enumerate() {
                        let gr = &gd[r * c..(r + 1) * c];
                        let hr = &xhat[r * c..(r + 1) * c];
                        let mut mean_d = T::zero();
                        let mut mean_dh = T::zero();
                        for j in 0..c {
                            let dh = gr[j] * gainv[j];
                            mean_d += dh;
                            mean_dh += dh * hr[j];
                        }
                        mean_d = mean_d / cn;
                        mean_dh = mean_dh / cn;
                        for j in 0..c {
                            let dh = gr[j] * gainv[j];
                            dx[r * c + j] = rs * (dh - mean_d - hr[j] * mean_dh);
                        }
                    }
                    let shape = self.shape(*x).to_vec();
                    self.accumulate(grads, *x, Tensor::from_parts(shape, dx));
                }
                if self.needs(*gain) || self.needs(*bias) {
                    let mut dg = vec![T::zero(); c];
                    let mut db = vec![T::zero(); c];
                    for (gr, hr) in gd.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            dg[j] += gr[j] * hr[j];
                            db[j] += gr[j];
                        }
                    }
                    let gs = self.shape(*gain).to_vec();
                    let bs = self.shape(*bias).to_vec();
                    self.accumulate(grads, *gain, Tensor::from_parts(gs, dg));
                    self.accumulate(grads, *bias, Tensor::from_parts(bs, db));
                }
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let c = g.last_dim();
                let mut dx = vec![T::zero(); y.len()];
                for ((dr, yr), gr) in dx.chunks_mut(c).zip(y.chunks(c)).zip(gd.chunks(c)) {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..c {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                let shape = self.shape(*x).to_vec();
                self.accumulate(grads, *x, Tensor::from_parts(shape, dx));
            }
            Op::Gelu(x) => {
                let tx = self.value(*x);
                let d = tx
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&v, &gv)| gv * gelu_parts(v).1)
                    .collect();
                self.accumulate(grads, *x, Tensor::from_parts(tx.shape().to_vec(), d));
            }
            Op::Softplus(x) => {
                let tx = self.value(*x);
                let d = tx.data().iter().zip(gd).map(|(&v, &gv)| gv * sigmoid(v)).collect();
                self.accumulate(grads, *x, Tensor::from_parts(tx.shape().to_vec(), d));
            }
            Op::Abs(x) => {
                let tx = self.value(*x);
                let d = tx
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&v, &gv)| {
                        if v > T::zero() {
                            gv
                        } else if v < T::zero() {
                            -gv
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                self.accumulate(grads, *x, Tensor::from_parts(tx.shape().to_vec(), d));
            }
            Op::Square(x) => {
                let tx = self.value(*x);
                let two = T::of(2.0);
                let d = tx.data().iter().zip(gd).map(|(&v, &gv)| two * v * gv).collect();
                self.accumulate(grads, *x, Tensor::from_parts(tx.shape().to_vec(), d));
            }
            Op::SumAll(x) => {
                let gv = gd[0];
                let shape = self.shape(*x).to_vec();
                self.accumulate(grads, *x, Tensor::full(&shape, gv));
            }
            Op::SumLastDim(x) => {
                let tx = self.value(*x);
                let c = tx.last_dim();
                let mut d = Vec::with_capacity(tx.numel());
                for &gv in gd {
                    d.extend(std::iter::repeat_n(gv, c));
                }
                self.accumulate(grads, *x, Tensor::from_parts(tx.shape().to_vec(), d));
            }
            Op::Reshape(x) => {
                let shape = self.shape(*x).to_vec();
                self.accumulate(grads, *x, Tensor::from_parts(shape, gd.to_vec()));
            }
            Op::Transpose(x) => {
                let (r, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                let mut d = vec![T::zero(); r * c];
                for i in 0..r {
                    for j in 0..c {
                        d[i * c + j] = gd[j * r + i];
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(vec![r, c], d));
            }
            Op::GatherRows { x, index } => {
                let shape = self.shape(*x).to_vec();
                let c = shape[1];
                let mut d = vec![T::zero(); shape[0] * c];
                for (o, i) in index.iter().enumerate() {
                    if let Some(i) = *i {
                        for j in 0..c {
                            d[i * c + j] += gd[o * c + j];
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(shape, d));
            }
            Op::Mean(xs) => {
                let inv = T::one() / T::of(xs.len() as f64);
                let scaled = g.map(|v| v * inv);
                for x in xs {
                    self.accumulate(grads, *x, scaled.clone());
                }
            }
            Op::Attention {
                q,
                k,
                v,
                layout,
                probs,
            } => {
                let (dq, dk, dv) = self.attention_backward(*q, *k, *v, layout, probs, gd);
                let (sq, sk, sv) = (
                    self.shape(*q).to_vec(),
                    self.shape(*k).to_vec(),
                    self.shape(*v).to_vec(),
                );
                self.accumulate(grads, *q, Tensor::from_parts(sq, dq));
                self.accumulate(grads, *k, Tensor::from_parts(sk, dk));
                self.accumulate(grads, *v, Tensor::from_parts(sv, dv));
            }
        }
    }

    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        layout: &AttentionLayout,
        probs: &[T],
        gd: &[T],
    ) -> (Vec<T>, Vec<T>, Vec<T>) {
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let (nq, c) = (self.shape(q)[0], self.shape(q)[1]);
        let nk = self.shape(k)[0];
        let heads = layout.heads;
        let d = c / heads;
        let bq = nq / layout.blocks;
        let bk = nk / layout.blocks;
        let scale = T::one() / T::of(d as f64).sqrt();
        let mut dq = vec![T::zero(); nq * c];
        let mut dk = vec![T::zero(); nk * c];
        let mut dv = vec![T::zero(); nk * c];
        let mut ds = vec![T::zero(); bk];
        for b in 0..layout.blocks {
            for h in 0..heads {
                let off = h * d;
                for i in 0..bq {
                    let qi = b * bq + i;
                    let p = &probs[((b * heads + h) * bq + i) * bk..][..bk];
                    let grow = &gd[qi * c + off..qi * c + off + d];
                    let mut dot = T::zero();
                    for (j, s) in ds.iter_mut().enumerate() {
                        let kj = b * bk + j;
                        if p[j] == T::zero() {
                            *s = T::zero();
                            continue;
                        }
                        let vrow = &vd[kj * c + off..kj * c + off + d];
                        let dp: T = grow.iter().zip(vrow).map(|(&x, &y)| x * y).sum();
                        *s = dp;
                        dot += p[j] * dp;
                        let dvrow = &mut dv[kj * c + off..kj * c + off + d];
                        for (o, &gv) in dvrow.iter_mut().zip(grow) {
                            *o += p[j] * gv;
                        }
                    }
                    let qrow = &qd[qi * c + off..qi * c + off + d];
                    for (j, s) in ds.iter().enumerate() {
                        if p[j] == T::zero() {
                            continue;
                        }
                        let kj = b * bk + j;
                        let dsj = p[j] * (*s - dot) * scale;
                        let krow = &kd[kj * c + off..kj * c + off + d];
                        let dqrow = &mut dq[qi * c + off..qi * c + off + d];
                        for (o, &kv) in dqrow.iter_mut().zip(krow) {
                            *o += dsj * kv;
                        }
                        let dkrow = &mut dk[kj * c + off..kj * c + off + d];
                        for (o, &qv) in dkrow.iter_mut().zip(qrow) {
                            *o += dsj * qv;
                        }
                    }
                }
            }
        }
        (dq, dk, dv)
    }
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = if *v == T::neg_infinity() {
            T::zero()
        } else {
            (*v - max).exp()
        };
        total += *v;
    }
    for v in row.iter_mut() {
        *v = *v / total;
    }
}

fn op_name<T: Real>(op: &Op<T>) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul(..) => "matmul",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::AddRow(..) => "add_row",
        Op::Scale(..) => "scale",
        Op::AddScalar(..) => "add_scalar",
        Op::LayerNorm { .. } => "layer_norm",
        Op::Softmax(..) => "softmax",
        Op::Gelu(..) => "gelu",
        Op::Softplus(..) => "softplus",
        Op::Abs(..) => "abs",
        Op::Square(..) => "square",
        Op::SumAll(..) => "sum_all",
        Op::SumLastDim(..) => "sum_last_dim",
        Op::Reshape(..) => "reshape",
        Op::Transpose(..) => "transpose",
        Op::GatherRows { .. } => "gather_rows",
        Op::Attention { .. } => "attention",
        Op::Mean(..) => "mean",
    }
}

/// Gradients from one backward sweep, indexed by [`Var`].
pub struct Gradients<T: Real = f32> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient for a leaf; `None` when the leaf did not influence the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for a leaf, zeros when unused.
    pub fn get_or_zeros(&self, tape: &Tape<T>, v: Var) -> Tensor<T> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(tape.shape(v)))
    }
}
