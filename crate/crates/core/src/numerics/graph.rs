//! Reverse-mode differentiation over a recorded tape of primitive operations.
//!
//! A [`Graph`] is an append-only list of nodes. Every primitive evaluates
//! eagerly, stores its output, and records what backward needs. Inputs always
//! precede their consumers, so [`Graph::backward`] is a single sweep in
//! reverse recording order. Gradients accumulate with `+=`, which is what makes
//! a parameter used by several branches (or by two encoder passes) come out
//! with the sum of the per-use gradients.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::tensor::gemm;
use crate::numerics::{ParamGrads, ParamId, ParamStore, Precision, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sum(Var),
    Mean(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Softmax(Var),
    LogSoftmax(Var),
    LnFloor {
        x: Var,
        floor: f64,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Overwrite {
        base: Var,
        rows: Vec<usize>,
        src: Var,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        layout: AttnLayout,
        probs: Vec<f64>,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
}

/// How a flat `[batch·seq × d]` activation splits into sequences and heads.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttnLayout {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
    /// Number of non-padding positions per sequence; keys at or past this index are never attended.
    pub lengths: Vec<usize>,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Per-node gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    precision: Precision,
    bound: HashMap<ParamId, Var>,
    bound_version: Option<u64>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_precision(precision: Precision) -> Self {
        Graph {
            precision,
            ..Self::default()
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, mut value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.precision.round_slice(value.data_mut());
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Untracked input; never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Tracked leaf not tied to a parameter store.
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Binds a stored parameter as a tracked leaf.
    ///
    /// Repeated binds of the same parameter return the same node, so every use
    /// within one graph shares a single copy of the value.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var> {
        match self.bound_version {
            Some(v) if v != store.version() => {
                return Err(Error::Internal(format!(
                    "parameter store changed while graph was recording (version {v} -> {})",
                    store.version()
                )))
            }
            _ => self.bound_version = Some(store.version()),
        }
        if let Some(&v) = self.bound.get(&id) {
            return Ok(v);
        }
        let v = self.push(store.get(id).clone(), Op::Leaf, true);
        self.nodes[v.0].param = Some(id);
        self.bound.insert(id, v);
        Ok(v)
    }

    /// Store version observed by every parameter bind on this graph.
    pub fn bound_version(&self) -> Option<u64> {
        self.bound_version
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::dim("add", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// Adds the vector `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if tb.numel() != ta.cols() {
            return Err(Error::dim("add_row", ta.shape(), tb.shape()));
        }
        let c = ta.cols();
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + tb.data()[i % c])
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::AddRow(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::dim("mul", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let ta = self.value(a);
        let out = Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|x| x * s).collect()).expect("same shape");
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, s), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let out = Tensor::new(
            ta.shape().to_vec(),
            ta.data().iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect(),
        )
        .expect("same shape");
        let rg = self.rg(&[a]);
        self.push(out, Op::Relu(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Normalizes each row over the last axis, then applies `gamma ⊙ · + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Config("layer_norm eps must be positive".into()));
        }
        let tx = self.value(x);
        let n = tx.cols();
        let (tg, tb) = (self.value(gamma), self.value(beta));
        if tg.numel() != n || tb.numel() != n {
            return Err(Error::dim("layer_norm", tx.shape(), tg.shape()));
        }
        let rows = tx.rows();
        let mut xhat = vec![0.0; tx.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; tx.numel()];
        for r in 0..rows {
            let row = tx.row(r);
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..n {
                let h = (row[j] - mu) * is;
                xhat[r * n + j] = h;
                out[r * n + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Row-wise softmax over the last axis, max-subtracted.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let mut out = tx.data().to_vec();
        for row in out.chunks_mut(tx.cols()) {
            softmax_in_place(row)?;
        }
        let out = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Softmax(x), rg))
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let mut out = tx.data().to_vec();
        for row in out.chunks_mut(tx.cols()) {
            log_softmax_in_place(row)?;
        }
        let out = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::LogSoftmax(x), rg))
    }

    /// `ln(max(x, floor))`; the gradient is zero where the floor is active.
    pub fn ln_floor(&mut self, x: Var, floor: f64) -> Var {
        let tx = self.value(x);
        let out = Tensor::new(
            tx.shape().to_vec(),
            tx.data().iter().map(|&v| v.max(floor).ln()).collect(),
        )
        .expect("same shape");
        let rg = self.rg(&[x]);
        self.push(out, Op::LnFloor { x, floor }, rg)
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let tl = self.value(logits);
        let k = tl.cols();
        if tl.rows() != targets.len() {
            return Err(Error::dim("cross_entropy", tl.shape(), &[targets.len()]));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::Schema(format!("target class {t} out of range for {k} classes")));
        }
        let mut probs = tl.data().to_vec();
        let mut loss = 0.0;
        for (row, &t) in probs.chunks_mut(k).zip(targets) {
            log_softmax_in_place(row)?;
            loss -= row[t];
            for p in row.iter_mut() {
                *p = p.exp();
            }
        }
        loss /= targets.len() as f64;
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Selects rows of `table` by index: the embedding lookup.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let (rows, d) = (tt.rows(), tt.cols());
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::Internal(format!(
                "row index {bad} out of range for table with {rows} rows"
            )));
        }
        if ids.is_empty() {
            return Err(Error::Usage("gather_rows with no indices".into()));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(tt.row(i));
        }
        let out = Tensor::matrix(ids.len(), d, out)?;
        let rg = self.rg(&[table]);
        Ok(self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Copy of `base` whose rows at `rows` are replaced by the rows of `src`, in order.
    pub fn overwrite_rows(&mut self, base: Var, rows: &[usize], src: Var) -> Result<Var> {
        let (tb, ts) = (self.value(base), self.value(src));
        if tb.cols() != ts.cols() || ts.rows() != rows.len() {
            return Err(Error::dim("overwrite_rows", tb.shape(), ts.shape()));
        }
        let mut seen = vec![false; tb.rows()];
        for &r in rows {
            if r >= tb.rows() || std::mem::replace(&mut seen[r], true) {
                return Err(Error::Internal(format!("overwrite row {r} invalid or repeated")));
            }
        }
        let mut out = tb.clone();
        for (k, &r) in rows.iter().enumerate() {
            out.row_mut(r).copy_from_slice(ts.row(k));
        }
        let rg = self.rg(&[base, src]);
        Ok(self.push(
            out,
            Op::Overwrite {
                base,
                rows: rows.to_vec(),
                src,
            },
            rg,
        ))
    }

    /// Scaled dot-product attention, all heads at once.
    ///
    /// `q`, `k`, `v` are `[batch·seq × d]`; head `h` owns columns
    /// `h·d/heads .. (h+1)·d/heads`. Keys past each sequence's length get
    /// exactly zero weight.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, layout: AttnLayout) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        if tq.shape() != tk.shape() || tq.shape() != tv.shape() {
            return Err(Error::dim("attention", tq.shape(), tk.shape()));
        }
        let d = tq.cols();
        let AttnLayout {
            batch,
            seq,
            heads,
            ref lengths,
        } = layout;
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("hidden {d} not divisible by {heads} heads")));
        }
        if tq.rows() != batch * seq || lengths.len() != batch {
            return Err(Error::dim("attention", tq.shape(), &[batch, seq]));
        }
        if lengths.iter().any(|&l| l == 0 || l > seq) {
            return Err(Error::Internal("attention length out of range".into()));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; batch * heads * seq * seq];
        let mut out = vec![0.0; batch * seq * d];
        let (qd, kd, vd) = (tq.data(), tk.data(), tv.data());
        let mut scores = vec![0.0; seq];
        for b in 0..batch {
            let len = lengths[b];
            for h in 0..heads {
                let off = h * dh;
                for i in 0..seq {
                    let qi = &qd[(b * seq + i) * d + off..][..dh];
                    for j in 0..len {
                        let kj = &kd[(b * seq + j) * d + off..][..dh];
                        scores[j] = dot(qi, kj) * scale;
                    }
                    softmax_in_place(&mut scores[..len])?;
                    let prow = &mut probs[((b * heads + h) * seq + i) * seq..][..seq];
                    prow[..len].copy_from_slice(&scores[..len]);
                    let oi = &mut out[(b * seq + i) * d + off..][..dh];
                    for j in 0..len {
                        let vj = &vd[(b * seq + j) * d + off..][..dh];
                        let p = prow[j];
                        for (o, x) in oi.iter_mut().zip(vj) {
                            *o += p * x;
                        }
                    }
                }
            }
        }
        let out = Tensor::matrix(batch * seq, d, out)?;
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(out, Op::Attention { q, k, v, layout, probs }, rg))
    }

    /// Inverted dropout. A rate of zero records nothing and returns `x`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if rate == 0.0 {
            return Ok(x);
        }
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} not in [0,1)")));
        }
        let tx = self.value(x);
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..tx.numel())
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let data = tx.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Dropout { x, mask }, rg))
    }

    /// Sweeps the tape backwards from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            self.backward_node(node, &gout, &mut grads);
            grads[idx] = Some(gout);
        }
        let precision = self.precision;
        for g in grads.iter_mut().flatten() {
            precision.round_slice(g);
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, node: &Node, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, contrib: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(g) => {
                    for (a, b) in g.iter_mut().zip(&contrib) {
                        *a += b;
                    }
                }
                slot @ None => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.nodes[a.0].requires_grad {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, gout, false, tb.data(), true, &mut da, 0.0);
                    acc(*a, da);
                }
                if self.nodes[b.0].requires_grad {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, ta.data(), true, gout, false, &mut db, 0.0);
                    acc(*b, db);
                }
            }
            Op::Add(a, b) => {
                acc(*a, gout.to_vec());
                acc(*b, gout.to_vec());
            }
            Op::AddRow(a, b) => {
                acc(*a, gout.to_vec());
                let c = self.value(*b).numel();
                let mut db = vec![0.0; c];
                for row in gout.chunks(c) {
                    for (d, g) in db.iter_mut().zip(row) {
                        *d += g;
                    }
                }
                acc(*b, db);
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                acc(*a, gout.iter().zip(tb.data()).map(|(g, y)| g * y).collect());
                acc(*b, gout.iter().zip(ta.data()).map(|(g, x)| g * x).collect());
            }
            Op::Scale(a, s) => acc(*a, gout.iter().map(|g| g * s).collect()),
            Op::Relu(a) => {
                let ta = self.value(*a);
                acc(
                    *a,
                    gout.iter()
                        .zip(ta.data())
                        .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                        .collect(),
                );
            }
            Op::Sum(a) => acc(*a, vec![gout[0]; self.value(*a).numel()]),
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                acc(*a, vec![gout[0] / n as f64; n]);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let g = self.value(*gamma).data();
                let n = g.len();
                let mut dx = vec![0.0; xhat.len()];
                let mut dgamma = vec![0.0; n];
                let mut dbeta = vec![0.0; n];
                for (r, is) in inv_std.iter().enumerate() {
                    let go = &gout[r * n..(r + 1) * n];
                    let xh = &xhat[r * n..(r + 1) * n];
                    let mut sum_d = 0.0;
                    let mut sum_dx = 0.0;
                    for j in 0..n {
                        let d = go[j] * g[j];
                        sum_d += d;
                        sum_dx += d * xh[j];
                        dgamma[j] += go[j] * xh[j];
                        dbeta[j] += go[j];
                    }
                    let nf = n as f64;
                    for j in 0..n {
                        let d = go[j] * g[j];
                        dx[r * n + j] = is / nf * (nf * d - sum_d - xh[j] * sum_dx);
                    }
                }
                acc(*x, dx);
                acc(*gamma, dgamma);
                acc(*beta, dbeta);
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let c = node.value.cols();
                let mut dx = vec![0.0; y.len()];
                for ((yr, gr), dr) in y.chunks(c).zip(gout.chunks(c)).zip(dx.chunks_mut(c)) {
                    let s: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        dr[j] = yr[j] * (gr[j] - s);
                    }
                }
                acc(*x, dx);
            }
            Op::LogSoftmax(x) => {
                let y = node.value.data();
                let c = node.value.cols();
                let mut dx = vec![0.0; y.len()];
                for ((yr, gr), dr) in y.chunks(c).zip(gout.chunks(c)).zip(dx.chunks_mut(c)) {
                    let s: f64 = gr.iter().sum();
                    for j in 0..c {
                        dr[j] = gr[j] - yr[j].exp() * s;
                    }
                }
                acc(*x, dx);
            }
            Op::LnFloor { x, floor } => {
                let tx = self.value(*x);
                acc(
                    *x,
                    gout.iter()
                        .zip(tx.data())
                        .map(|(g, &v)| if v > *floor { g / v } else { 0.0 })
                        .collect(),
                );
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let k = self.value(*logits).cols();
                let scale = gout[0] / targets.len() as f64;
                let mut d = probs.clone();
                for (row, &t) in d.chunks_mut(k).zip(targets) {
                    row[t] -= 1.0;
                    for x in row.iter_mut() {
                        *x *= scale;
                    }
                }
                acc(*logits, d);
            }
            Op::Gather { table, ids } => {
                let tt = self.value(*table);
                let d = tt.cols();
                let mut dt = vec![0.0; tt.numel()];
                for (k, &i) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[i * d + j] += gout[k * d + j];
                    }
                }
                acc(*table, dt);
            }
            Op::Overwrite { base, rows, src } => {
                let d = self.value(*base).cols();
                let mut dbase = gout.to_vec();
                let mut dsrc = vec![0.0; rows.len() * d];
                for (k, &r) in rows.iter().enumerate() {
                    dsrc[k * d..(k + 1) * d].copy_from_slice(&gout[r * d..(r + 1) * d]);
                    dbase[r * d..(r + 1) * d].iter_mut().for_each(|x| *x = 0.0);
                }
                acc(*base, dbase);
                acc(*src, dsrc);
            }
            Op::Attention { q, k, v, layout, probs } => {
                let (tq, tk, tv) = (self.value(*q), self.value(*k), self.value(*v));
                let d = tq.cols();
                let (seq, heads) = (layout.seq, layout.heads);
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let (qd, kd, vd) = (tq.data(), tk.data(), tv.data());
                let mut dq = vec![0.0; qd.len()];
                let mut dk = vec![0.0; kd.len()];
                let mut dv = vec![0.0; vd.len()];
                let mut dp = vec![0.0; seq];
                for b in 0..layout.batch {
                    let len = layout.lengths[b];
                    for h in 0..heads {
                        let off = h * dh;
                        for i in 0..seq {
                            let prow = &probs[((b * heads + h) * seq + i) * seq..][..seq];
                            let go = &gout[(b * seq + i) * d + off..][..dh];
                            for j in 0..len {
                                let vj = &vd[(b * seq + j) * d + off..][..dh];
                                dp[j] = dot(go, vj);
                                let dvj = &mut dv[(b * seq + j) * d + off..][..dh];
                                for (x, g) in dvj.iter_mut().zip(go) {
                                    *x += prow[j] * g;
                                }
                            }
                            let s: f64 = (0..len).map(|j| prow[j] * dp[j]).sum();
                            for j in 0..len {
                                let ds = prow[j] * (dp[j] - s) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                let qrow = (b * seq + i) * d + off;
                                let krow = (b * seq + j) * d + off;
                                for c in 0..dh {
                                    dq[qrow + c] += ds * kd[krow + c];
                                    dk[krow + c] += ds * qd[qrow + c];
                                }
                            }
                        }
                    }
                }
                acc(*q, dq);
                acc(*k, dk);
                acc(*v, dv);
            }
            Op::Dropout { x, mask } => {
                acc(*x, gout.iter().zip(mask).map(|(g, m)| g * m).collect());
            }
        }
    }

    /// Collects gradients of bound parameters, summing over repeated binds.
    pub fn param_grads(&self, store: &ParamStore, grads: &Gradients) -> ParamGrads {
        let mut out = ParamGrads::empty(store.len());
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Some(pid), Some(g)) = (node.param, grads.grads[i].as_ref()) {
                out.accumulate(pid, node.value.shape(), g);
            }
        }
        out
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Stable softmax of one row.
pub fn softmax_in_place(row: &mut [f64]) -> Result<()> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() || row.iter().any(|x| x.is_nan()) {
        return Err(Error::Numeric(format!("softmax over non-finite input {row:?}")));
    }
    let mut z = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        z += *x;
    }
    for x in row.iter_mut() {
        *x /= z;
    }
    Ok(())
}

pub fn log_softmax_in_place(row: &mut [f64]) -> Result<()> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() || row.iter().any(|x| x.is_nan()) {
        return Err(Error::Numeric(format!("log-softmax over non-finite input {row:?}")));
    }
    let lse = row.iter().map(|x| (x - max).exp()).sum::<f64>().ln() + max;
    for x in row.iter_mut() {
        *x -= lse;
    }
    Ok(())
}
