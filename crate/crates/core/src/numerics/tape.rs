//! Reverse-mode automatic differentiation over a linear tape of matrix ops.
//!
//! Every op appends one node whose inputs already live on the tape, so the
//! node order is a topological order and a single reverse sweep visits each
//! node once. Tensors are treated as matrices: leading dimensions fold into
//! rows (see [`Tensor::rows`]).

use super::kernels::{gemm, View};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Probability floor applied before taking logarithms in the likelihood ops.
pub const LOG_FLOOR: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
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
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Softmax {
        x: Var,
        outer: usize,
        axis_len: usize,
        inner: usize,
    },
    GatherSum {
        table: Var,
        groups: Vec<Vec<usize>>,
    },
    RelBias {
        table: Var,
        buckets: Vec<usize>,
        heads: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        bias: Option<Var>,
        probs: Vec<f64>,
        heads: usize,
        scale: f64,
    },
    Sum(Var),
    SoftmaxXent {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
        probs: Vec<f64>,
    },
    ProbNll {
        p: Var,
        index: usize,
        weight: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of `v`, or `None` when `v` does not require grad or is not
    /// reachable from the seeds.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v` as a tensor of the same shape; zeros when unreachable.
    pub fn tensor(&self, v: Var) -> Tensor {
        let shape = self.shapes[v.0].clone();
        match self.get(v) {
            Some(g) => Tensor::new(shape, g.to_vec()).expect("gradient shape"),
            None => Tensor::zeros(&shape),
        }
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn gelu_parts(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let inner = C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x);
    (y, dy)
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Places a tensor on the tape; gradients are tracked iff the tensor has
    /// `requires_grad` set.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad();
        self.push(t, Op::Leaf, rg)
    }

    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.set_requires_grad(false);
        self.push(t, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = (ta.rows(), ta.cols());
        let (k2, n) = (tb.rows(), tb.cols());
        if k != k2 || tb.shape().len() > 2 {
            return Err(shape_err("matmul", ta, tb));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            1.0,
            View::rowmajor(ta.data(), k),
            View::rowmajor(tb.data(), n),
            0.0,
            &mut out,
            0,
            n,
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("add", ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    /// Adds a `1 x n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(row));
        let n = ta.cols();
        if tb.len() != n {
            return Err(shape_err("add_row", ta, tb));
        }
        let mut data = ta.data().to_vec();
        for chunk in data.chunks_mut(n) {
            for (x, b) in chunk.iter_mut().zip(tb.data()) {
                *x += b;
            }
        }
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a, row]);
        Ok(self.push(t, Op::AddRow(a, row), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("mul", ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| x * c).collect();
        let t = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[a]);
        self.push(t, Op::Scale(a, c), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| gelu_parts(x).0).collect();
        let t = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[a]);
        self.push(t, Op::Gelu(a), rg)
    }

    /// Row-wise layer normalization with learned gain and bias (`1 x n` each).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let tx = self.value(x);
        let n = tx.cols();
        for p in [gain, bias] {
            if self.value(p).len() != n {
                return Err(shape_err("layer_norm", tx, self.value(p)));
            }
        }
        let (tg, tb) = (self.value(gain).data(), self.value(bias).data());
        let rows = tx.rows();
        let mut out = vec![0.0; rows * n];
        let mut xhat = vec![0.0; rows * n];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = tx.row_slice(r);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..n {
                let h = (row[c] - mean) * rs;
                xhat[r * n + c] = h;
                out[r * n + c] = h * tg[c] + tb[c];
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Softmax along `axis`, shifted by the running max for stability.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let tx = self.value(x);
        let shape = tx.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid(format!(
                "softmax axis {axis} for shape {shape:?}"
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let axis_len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = tx.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for j in 0..inner {
                let idx = |i: usize| (o * axis_len + i) * inner + j;
                let max = (0..axis_len)
                    .map(|i| src[idx(i)])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for i in 0..axis_len {
                    let e = (src[idx(i)] - max).exp();
                    out[idx(i)] = e;
                    sum += e;
                }
                for i in 0..axis_len {
                    out[idx(i)] /= sum;
                }
            }
        }
        let t = Tensor::new(shape, out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            t,
            Op::Softmax {
                x,
                outer,
                axis_len,
                inner,
            },
            rg,
        ))
    }

    /// Output row `i` is the sum of the table rows listed in `groups[i]`
    /// (zeros for an empty group). Embedding lookup is the singleton case.
    pub fn gather_sum(&mut self, table: Var, groups: Vec<Vec<usize>>) -> Result<Var> {
        let tt = self.value(table);
        let (vrows, d) = (tt.rows(), tt.cols());
        let mut out = vec![0.0; groups.len() * d];
        for (r, group) in groups.iter().enumerate() {
            for &idx in group {
                if idx >= vrows {
                    return Err(Error::IndexOutOfRange {
                        what: "gather",
                        index: idx,
                        len: vrows,
                    });
                }
                for (o, x) in out[r * d..(r + 1) * d].iter_mut().zip(tt.row_slice(idx)) {
                    *o += x;
                }
            }
        }
        let t = Tensor::new(vec![groups.len(), d], out)?;
        let rg = self.rg(&[table]);
        Ok(self.push(t, Op::GatherSum { table, groups }, rg))
    }

    pub fn embed(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.gather_sum(table, ids.iter().map(|&i| vec![i]).collect())
    }

    /// Expands a `buckets x heads` table into a `heads x sq x sk` bias tensor,
    /// `out[h][u][v] = table[buckets[u * sk + v]][h]`.
    pub fn rel_bias(&mut self, table: Var, buckets: Vec<usize>, sq: usize, sk: usize) -> Result<Var> {
        let tt = self.value(table);
        let (nb, heads) = (tt.rows(), tt.cols());
        if buckets.len() != sq * sk {
            return Err(Error::invalid(format!(
                "rel_bias: {} buckets for a {sq}x{sk} grid",
                buckets.len()
            )));
        }
        let mut out = vec![0.0; heads * sq * sk];
        for (uv, &b) in buckets.iter().enumerate() {
            if b >= nb {
                return Err(Error::IndexOutOfRange {
                    what: "rel_bias bucket",
                    index: b,
                    len: nb,
                });
            }
            for h in 0..heads {
                out[h * sq * sk + uv] = tt.get(b, h);
            }
        }
        let t = Tensor::new(vec![heads, sq, sk], out)?;
        let rg = self.rg(&[table]);
        Ok(self.push(
            t,
            Op::RelBias {
                table,
                buckets,
                heads,
            },
            rg,
        ))
    }

    /// Multi-head scaled dot-product attention with an additive relative
    /// bias inside the scaling: `softmax((q_h k_h^T + bias_h) * scale) v_h`.
    ///
    /// `mask[u * sk + v] == false` removes key `v` from query `u`. A query
    /// with no admissible key yields a zero row.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        bias: Option<Var>,
        mask: Option<&[bool]>,
        heads: usize,
        scale: f64,
    ) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let (sq, d) = (tq.rows(), tq.cols());
        let sk = tk.rows();
        if tk.cols() != d || tv.cols() != d || tv.rows() != sk {
            return Err(shape_err("attention", tq, tk));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::invalid(format!("attention: {d} not divisible by {heads} heads")));
        }
        if let Some(b) = bias {
            let tb = self.value(b);
            if tb.shape() != [heads, sq, sk] {
                return Err(Error::ShapeMismatch {
                    op: "attention bias",
                    left: vec![heads, sq, sk],
                    right: tb.shape().to_vec(),
                });
            }
        }
        if let Some(m) = mask {
            if m.len() != sq * sk {
                return Err(Error::invalid("attention: mask size"));
            }
        }
        let dh = d / heads;
        let mut probs = vec![0.0; heads * sq * sk];
        let mut out = vec![0.0; sq * d];
        for h in 0..heads {
            let block = &mut probs[h * sq * sk..(h + 1) * sq * sk];
            gemm(
                sq,
                dh,
                sk,
                1.0,
                View::rowmajor(tq.data(), d).at(h * dh),
                View::transposed(tk.data(), d).at(h * dh),
                0.0,
                block,
                0,
                sk,
            );
            if let Some(b) = bias {
                let tb = &self.value(b).data()[h * sq * sk..(h + 1) * sq * sk];
                for (s, x) in block.iter_mut().zip(tb) {
                    *s += x;
                }
            }
            for u in 0..sq {
                let row = &mut block[u * sk..(u + 1) * sk];
                let mut max = f64::NEG_INFINITY;
                for (vi, s) in row.iter_mut().enumerate() {
                    if mask.is_some_and(|m| !m[u * sk + vi]) {
                        *s = f64::NEG_INFINITY;
                    } else {
                        *s *= scale;
                        max = max.max(*s);
                    }
                }
                if max == f64::NEG_INFINITY {
                    row.iter_mut().for_each(|s| *s = 0.0);
                    continue;
                }
                let mut sum = 0.0;
                for s in row.iter_mut() {
                    *s = (*s - max).exp();
                    sum += *s;
                }
                for s in row.iter_mut() {
                    *s /= sum;
                }
            }
            gemm(
                sq,
                sk,
                dh,
                1.0,
                View::rowmajor(block, sk),
                View::rowmajor(tv.data(), d).at(h * dh),
                0.0,
                &mut out,
                h * dh,
                d,
            );
        }
        let t = Tensor::new(vec![sq, d], out)?;
        let mut inputs = vec![q, k, v];
        inputs.extend(bias);
        let rg = self.rg(&inputs);
        Ok(self.push(
            t,
            Op::Attention {
                q,
                k,
                v,
                bias,
                probs,
                heads,
                scale,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum::<f64>();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    /// `sum_r w_r * -ln(max(softmax(logits_r)[t_r], LOG_FLOOR))`.
    pub fn softmax_xent(&mut self, logits: Var, targets: Vec<usize>, weights: Vec<f64>) -> Result<Var> {
        let tl = self.value(logits);
        let (rows, c) = (tl.rows(), tl.cols());
        if targets.len() != rows || weights.len() != rows {
            return Err(Error::invalid(format!(
                "softmax_xent: {rows} rows, {} targets, {} weights",
                targets.len(),
                weights.len()
            )));
        }
        let mut probs = vec![0.0; rows * c];
        let mut loss = 0.0;
        for r in 0..rows {
            if targets[r] >= c {
                return Err(Error::IndexOutOfRange {
                    what: "softmax_xent target",
                    index: targets[r],
                    len: c,
                });
            }
            let row = tl.row_slice(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let pr = &mut probs[r * c..(r + 1) * c];
            let mut sum = 0.0;
            for (p, x) in pr.iter_mut().zip(row) {
                *p = (x - max).exp();
                sum += *p;
            }
            pr.iter_mut().for_each(|p| *p /= sum);
            if weights[r] != 0.0 {
                loss -= weights[r] * pr[targets[r]].max(LOG_FLOOR).ln();
            }
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxXent {
                logits,
                targets,
                weights,
                probs,
            },
            rg,
        ))
    }

    /// `-weight * ln(max(p[index], LOG_FLOOR))` for a probability tensor `p`.
    pub fn prob_nll(&mut self, p: Var, index: usize, weight: f64) -> Result<Var> {
        let tp = self.value(p);
        if index >= tp.len() {
            return Err(Error::IndexOutOfRange {
                what: "cross_entropy target",
                index,
                len: tp.len(),
            });
        }
        let loss = if weight == 0.0 {
            0.0
        } else {
            -weight * tp.data()[index].max(LOG_FLOOR).ln()
        };
        let rg = self.rg(&[p]);
        Ok(self.push(Tensor::scalar(loss), Op::ProbNll { p, index, weight }, rg))
    }

    /// Reverse sweep seeded with `d(out)/d(out) = 1` for a scalar output.
    pub fn backward(&self, out: Var) -> Gradients {
        let n = self.value(out).len();
        self.backward_seeded(&[(out, vec![1.0; n])])
    }

    /// Reverse sweep with explicit upstream gradients for one or more nodes.
    pub fn backward_seeded(&self, seeds: &[(Var, Vec<f64>)]) -> Gradients {
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        let mut top = 0;
        for (v, g) in seeds {
            assert_eq!(g.len(), self.value(*v).len(), "seed gradient size");
            if !self.nodes[v.0].requires_grad {
                continue;
            }
            accumulate(&mut grads, v.0, g);
            top = top.max(v.0 + 1);
        }
        for i in (0..top).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if self.wants(*a) {
                    let ga = slot(grads, a.0, m * k);
                    gemm(
                        m,
                        n,
                        k,
                        1.0,
                        View::rowmajor(g, n),
                        View::transposed(tb.data(), n),
                        1.0,
                        ga,
                        0,
                        k,
                    );
                }
                if self.wants(*b) {
                    let gb = slot(grads, b.0, k * n);
                    gemm(
                        k,
                        m,
                        n,
                        1.0,
                        View::transposed(ta.data(), k),
                        View::rowmajor(g, n),
                        1.0,
                        gb,
                        0,
                        n,
                    );
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if self.wants(*v) {
                        accumulate(grads, v.0, g);
                    }
                }
            }
            Op::AddRow(a, row) => {
                if self.wants(*a) {
                    accumulate(grads, a.0, g);
                }
                if self.wants(*row) {
                    let n = self.value(*row).len();
                    let gr = slot(grads, row.0, n);
                    for chunk in g.chunks(n) {
                        for (x, y) in gr.iter_mut().zip(chunk) {
                            *x += y;
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    let ga = slot(grads, a.0, g.len());
                    for ((x, gi), bi) in ga.iter_mut().zip(g).zip(tb) {
                        *x += gi * bi;
                    }
                }
                if self.wants(*b) {
                    let gb = slot(grads, b.0, g.len());
                    for ((x, gi), ai) in gb.iter_mut().zip(g).zip(ta) {
                        *x += gi * ai;
                    }
                }
            }
            Op::Scale(a, c) => {
                if self.wants(*a) {
                    let ga = slot(grads, a.0, g.len());
                    for (x, gi) in ga.iter_mut().zip(g) {
                        *x += gi * c;
                    }
                }
            }
            Op::Gelu(a) => {
                if self.wants(*a) {
                    let ta = self.value(*a).data();
                    let ga = slot(grads, a.0, g.len());
                    for ((x, gi), ai) in ga.iter_mut().zip(g).zip(ta) {
                        *x += gi * gelu_parts(*ai).1;
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let n = self.value(*x).cols();
                let rows = rstd.len();
                let tg = self.value(*gain).data();
                if self.wants(*gain) {
                    let gg = slot(grads, gain.0, n);
                    for r in 0..rows {
                        for c in 0..n {
                            gg[c] += g[r * n + c] * xhat[r * n + c];
                        }
                    }
                }
                if self.wants(*bias) {
                    let gb = slot(grads, bias.0, n);
                    for r in 0..rows {
                        for c in 0..n {
                            gb[c] += g[r * n + c];
                        }
                    }
                }
                if self.wants(*x) {
                    let gx = slot(grads, x.0, rows * n);
                    let nf = n as f64;
                    for r in 0..rows {
                        let mut sum_dh = 0.0;
                        let mut sum_dh_h = 0.0;
                        for c in 0..n {
                            let dh = g[r * n + c] * tg[c];
                            sum_dh += dh;
                            sum_dh_h += dh * xhat[r * n + c];
                        }
                        for c in 0..n {
                            let dh = g[r * n + c] * tg[c];
                            gx[r * n + c] +=
                                rstd[r] * (dh - sum_dh / nf - xhat[r * n + c] * sum_dh_h / nf);
                        }
                    }
                }
            }
            Op::Softmax {
                x,
                outer,
                axis_len,
                inner,
            } => {
                if self.wants(*x) {
                    let y = node.value.data();
                    let gx = slot(grads, x.0, y.len());
                    for o in 0..*outer {
                        for j in 0..*inner {
                            let idx = |k: usize| (o * axis_len + k) * inner + j;
                            let dot: f64 = (0..*axis_len).map(|k| y[idx(k)] * g[idx(k)]).sum();
                            for k in 0..*axis_len {
                                gx[idx(k)] += y[idx(k)] * (g[idx(k)] - dot);
                            }
                        }
                    }
                }
            }
            Op::GatherSum { table, groups } => {
                if self.wants(*table) {
                    let tt = self.value(*table);
                    let d = tt.cols();
                    let gt = slot(grads, table.0, tt.len());
                    for (r, group) in groups.iter().enumerate() {
                        for &idx in group {
                            for (x, y) in gt[idx * d..(idx + 1) * d].iter_mut().zip(&g[r * d..(r + 1) * d]) {
                                *x += y;
                            }
                        }
                    }
                }
            }
            Op::RelBias {
                table,
                buckets,
                heads,
            } => {
                if self.wants(*table) {
                    let tt = self.value(*table);
                    let plane = buckets.len();
                    let gt = slot(grads, table.0, tt.len());
                    for (uv, &b) in buckets.iter().enumerate() {
                        for h in 0..*heads {
                            gt[b * heads + h] += g[h * plane + uv];
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                bias,
                probs,
                heads,
                scale,
            } => self.backprop_attention(*q, *k, *v, *bias, probs, *heads, *scale, g, grads),
            Op::Sum(a) => {
                if self.wants(*a) {
                    let n = self.value(*a).len();
                    let ga = slot(grads, a.0, n);
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            Op::SoftmaxXent {
                logits,
                targets,
                weights,
                probs,
            } => {
                if self.wants(*logits) {
                    let c = self.value(*logits).cols();
                    let gl = slot(grads, logits.0, probs.len());
                    for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                        if w == 0.0 || probs[r * c + t] < LOG_FLOOR {
                            continue;
                        }
                        let scale = g[0] * w;
                        for j in 0..c {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            gl[r * c + j] += scale * (probs[r * c + j] - onehot);
                        }
                    }
                }
            }
            Op::ProbNll { p, index, weight } => {
                if self.wants(*p) {
                    let tp = self.value(*p);
                    let pv = tp.data()[*index];
                    let gp = slot(grads, p.0, tp.len());
                    if *weight != 0.0 && pv >= LOG_FLOOR {
                        gp[*index] += -g[0] * weight / pv;
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_attention(
        &self,
        q: Var,
        k: Var,
        v: Var,
        bias: Option<Var>,
        probs: &[f64],
        heads: usize,
        scale: f64,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let (sq, d, sk) = (tq.rows(), tq.cols(), tk.rows());
        let dh = d / heads;
        let mut dprobs = vec![0.0; sq * sk];
        let mut dscores = vec![0.0; heads * sq * sk];
        for h in 0..heads {
            let p = &probs[h * sq * sk..(h + 1) * sq * sk];
            if self.wants(v) {
                let gv = slot(grads, v.0, sk * d);
                // dV_h += P^T dOut_h
                gemm(
                    sk,
                    sq,
                    dh,
                    1.0,
                    View::transposed(p, sk),
                    View::rowmajor(g, d).at(h * dh),
                    1.0,
                    gv,
                    h * dh,
                    d,
                );
            }
            // dP = dOut_h V_h^T
            gemm(
                sq,
                dh,
                sk,
                1.0,
                View::rowmajor(g, d).at(h * dh),
                View::transposed(tv.data(), d).at(h * dh),
                0.0,
                &mut dprobs,
                0,
                sk,
            );
            let ds = &mut dscores[h * sq * sk..(h + 1) * sq * sk];
            for u in 0..sq {
                let pr = &p[u * sk..(u + 1) * sk];
                let dp = &dprobs[u * sk..(u + 1) * sk];
                let dot: f64 = pr.iter().zip(dp).map(|(a, b)| a * b).sum();
                for vi in 0..sk {
                    ds[u * sk + vi] = pr[vi] * (dp[vi] - dot) * scale;
                }
            }
            if self.wants(q) {
                let gq = slot(grads, q.0, sq * d);
                gemm(
                    sq,
                    sk,
                    dh,
                    1.0,
                    View::rowmajor(ds, sk),
                    View::rowmajor(tk.data(), d).at(h * dh),
                    1.0,
                    gq,
                    h * dh,
                    d,
                );
            }
            if self.wants(k) {
                let gk = slot(grads, k.0, sk * d);
                gemm(
                    sk,
                    sq,
                    dh,
                    1.0,
                    View::transposed(ds, sk),
                    View::rowmajor(tq.data(), d).at(h * dh),
                    1.0,
                    gk,
                    h * dh,
                    d,
                );
            }
        }
        if let Some(b) = bias {
            if self.wants(b) {
                accumulate(grads, b.0, &dscores);
            }
        }
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], idx: usize, len: usize) -> &mut [f64] {
    grads[idx].get_or_insert_with(|| vec![0.0; len])
}

fn accumulate(grads: &mut [Option<Vec<f64>>], idx: usize, g: &[f64]) {
    match &mut grads[idx] {
        Some(existing) => existing.iter_mut().zip(g).for_each(|(x, y)| *x += y),
        empty => *empty = Some(g.to_vec()),
    }
}
