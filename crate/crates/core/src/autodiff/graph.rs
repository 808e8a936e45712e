use std::fmt::Debug;

use crate::error::{Error, Result};
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A user-supplied differentiable primitive.
///
/// `backward` returns one gradient per input, each shaped like that input.
pub trait CustomOp<S: Scalar>: Debug {
    fn name(&self) -> &str;
    fn forward(&self, inputs: &[&Tensor<S>]) -> Result<Tensor<S>>;
    fn backward(&self, inputs: &[&Tensor<S>], output: &Tensor<S>, grad_out: &Tensor<S>) -> Vec<Tensor<S>>;
}

#[derive(Debug)]
enum Op<S: Scalar> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, S),
    Relu(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<S>,
        inv_std: Vec<S>,
    },
    MeanSegments {
        x: Var,
        seg: usize,
    },
    RepeatRows {
        x: Var,
        times: usize,
    },
    GradReverse {
        x: Var,
        lambda: S,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        seg: usize,
        scale: S,
        probs: Vec<S>,
    },
    ConcatCols(Vec<Var>),
    Transpose(Var),
    Sum(Var),
    Mean(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<S>,
        count: usize,
    },
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp<S>>,
    },
}

#[derive(Debug)]
struct Node<S: Scalar> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Define-by-run computation graph with reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order and the reverse pass is a single backwards sweep.
#[derive(Debug, Default)]
pub struct Graph<S: Scalar> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Tensor<S>>>,
}

fn dims2<S: Scalar>(t: &Tensor<S>) -> (usize, usize) {
    (t.rows(), t.cols())
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads[v.0].as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Numeric(format!("non-finite output from {}", op_name(&op))));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Result<Var> {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<S>) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor<S>) -> Result<Var> {
        self.leaf(value, true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() > 2 || tb.shape().len() > 2 {
            return Err(Error::dim("matmul expects matrices"));
        }
        let out = ta.matmul(tb)?;
        let rg = self.rg(&[a, b]);
        self.push(out, Op::MatMul(a, b), rg)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::dim(format!("{what}: shapes {sa:?} and {sb:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Mul(a, b), rg)
    }

    /// `(m×n) + (1×n)`: the row is added to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (tx, tr) = (self.value(x), self.value(row));
        let n = tx.cols();
        if tr.numel() != n {
            return Err(Error::dim(format!(
                "add_row: row of {} values for {n} columns",
                tr.numel()
            )));
        }
        let mut out = tx.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v = *v + tr.data()[i % n];
        }
        let rg = self.rg(&[x, row]);
        self.push(out, Op::AddRow(x, row), rg)
    }

    pub fn scale(&mut self, x: Var, c: S) -> Result<Var> {
        let out = self.value(x).map(|v| v * c);
        let rg = self.rg(&[x]);
        self.push(out, Op::Scale(x, c), rg)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v.max(S::zero()));
        let rg = self.rg(&[x]);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let mut out = tx.clone();
        let n = tx.cols();
        for row in out.data_mut().chunks_mut(n) {
            softmax_in_place(row);
        }
        let rg = self.rg(&[x]);
        self.push(out, Op::SoftmaxRows(x), rg)
    }

    /// Normalizes each row over its features, then applies per-feature gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: S) -> Result<Var> {
        if eps <= S::zero() {
            return Err(Error::contract("layer_norm eps must be positive"));
        }
        let tx = self.value(x);
        let (m, n) = dims2(tx);
        let (tg, tb) = (self.value(gain), self.value(bias));
        if tg.numel() != n || tb.numel() != n {
            return Err(Error::dim(format!(
                "layer_norm: gain/bias of {}/{} values for {n} features",
                tg.numel(),
                tb.numel()
            )));
        }
        let nf = lit::<S>(n as f64);
        let mut xhat = vec![S::zero(); m * n];
        let mut inv_std = vec![S::zero(); m];
        let mut out = vec![S::zero(); m * n];
        for r in 0..m {
            let row = tx.row(r);
            let mean = row.iter().copied().sum::<S>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / nf;
            let is = S::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..n {
                let h = (row[c] - mean) * is;
                xhat[r * n + c] = h;
                out[r * n + c] = h * tg.data()[c] + tb.data()[c];
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(&[x, gain, bias]);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    /// Column means over consecutive blocks of `seg` rows: `(B·seg)×n → B×n`.
    pub fn mean_segments(&mut self, x: Var, seg: usize) -> Result<Var> {
        let tx = self.value(x);
        let (m, n) = dims2(tx);
        if seg == 0 || m % seg != 0 {
            return Err(Error::dim(format!("{m} rows do not split into segments of {seg}")));
        }
        let b = m / seg;
        let inv = S::one() / lit::<S>(seg as f64);
        let mut out = vec![S::zero(); b * n];
        for r in 0..m {
            let dst = &mut out[(r / seg) * n..(r / seg + 1) * n];
            for (o, &v) in dst.iter_mut().zip(tx.row(r)) {
                *o = *o + v;
            }
        }
        for v in &mut out {
            *v = *v * inv;
        }
        let out = Tensor::new(vec![b, n], out)?;
        let rg = self.rg(&[x]);
        self.push(out, Op::MeanSegments { x, seg }, rg)
    }

    /// Repeats every row `times` times consecutively: `B×n → (B·times)×n`.
    pub fn repeat_rows(&mut self, x: Var, times: usize) -> Result<Var> {
        if times == 0 {
            return Err(Error::dim("repeat_rows by zero"));
        }
        let tx = self.value(x);
        let (m, n) = dims2(tx);
        let mut out = Vec::with_capacity(m * times * n);
        for r in 0..m {
            for _ in 0..times {
                out.extend_from_slice(tx.row(r));
            }
        }
        let out = Tensor::new(vec![m * times, n], out)?;
        let rg = self.rg(&[x]);
        self.push(out, Op::RepeatRows { x, times }, rg)
    }

    /// Identity forward; the backward pass multiplies the upstream gradient by `-lambda`.
    pub fn grad_reverse(&mut self, x: Var, lambda: S) -> Result<Var> {
        if lambda < S::zero() {
            return Err(Error::contract("gradient reversal scale must be non-negative"));
        }
        let out = self.value(x).clone();
        let rg = self.rg(&[x]);
        self.push(out, Op::GradReverse { x, lambda }, rg)
    }

    /// Scaled dot-product attention, applied independently to consecutive
    /// blocks of `seg` rows (one block per sequence). No masking.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, seg: usize, scale: S) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let (m, dk) = dims2(tq);
        let dv = tv.cols();
        if tk.rows() != m || tk.cols() != dk || tv.rows() != m {
            return Err(Error::dim(format!(
                "attention: q {:?}, k {:?}, v {:?}",
                tq.shape(),
                tk.shape(),
                tv.shape()
            )));
        }
        if seg == 0 || m % seg != 0 {
            return Err(Error::dim(format!("{m} rows do not split into sequences of {seg}")));
        }
        let mut probs = vec![S::zero(); m * seg];
        let mut out = vec![S::zero(); m * dv];
        for b in 0..m / seg {
            let o = b * seg;
            let p = &mut probs[o * seg..(o + seg) * seg];
            // scores = Q_b · K_bᵀ
            S::gemm_strided(
                seg,
                dk,
                seg,
                scale,
                &tq.data()[o * dk..(o + seg) * dk],
                dk as isize,
                1,
                &tk.data()[o * dk..(o + seg) * dk],
                1,
                dk as isize,
                S::zero(),
                p,
            );
            for row in p.chunks_mut(seg) {
                softmax_in_place(row);
            }
            S::gemm(
                seg,
                seg,
                dv,
                S::one(),
                p,
                &tv.data()[o * dv..(o + seg) * dv],
                S::zero(),
                &mut out[o * dv..(o + seg) * dv],
            );
        }
        let out = Tensor::new(vec![m, dv], out)?;
        let rg = self.rg(&[q, k, v]);
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                seg,
                scale,
                probs,
            },
            rg,
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::dim("concat_cols of nothing"))?;
        let m = self.value(*first).rows();
        if parts.iter().any(|p| self.value(*p).rows() != m) {
            return Err(Error::dim("concat_cols: row counts differ"));
        }
        let total: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut out = Vec::with_capacity(m * total);
        for r in 0..m {
            for p in parts {
                out.extend_from_slice(self.value(*p).row(r));
            }
        }
        let out = Tensor::new(vec![m, total], out)?;
        let rg = self.rg(parts);
        self.push(out, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).transpose();
        let rg = self.rg(&[x]);
        self.push(out, Op::Transpose(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(out, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let out = Tensor::scalar(t.sum() / lit::<S>(t.numel() as f64));
        let rg = self.rg(&[x]);
        self.push(out, Op::Mean(x), rg)
    }

    /// Mean softmax cross-entropy over the rows that carry a target.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let tl = self.value(logits);
        let (m, c) = dims2(tl);
        if targets.len() != m {
            return Err(Error::dim(format!("{} targets for {m} rows of logits", targets.len())));
        }
        let count = targets.iter().flatten().count();
        if count == 0 {
            return Err(Error::contract("cross-entropy over zero labeled rows"));
        }
        let mut probs = tl.data().to_vec();
        let mut total = S::zero();
        for (r, target) in targets.iter().enumerate() {
            let row = &mut probs[r * c..(r + 1) * c];
            let logits_row = tl.row(r);
            let max = logits_row.iter().copied().fold(S::neg_infinity(), S::max);
            let lse = max + logits_row.iter().map(|&v| (v - max).exp()).sum::<S>().ln();
            softmax_in_place(row);
            if let Some(t) = *target {
                if t >= c {
                    return Err(Error::dim(format!("target {t} out of {c} classes")));
                }
                total = total + lse - logits_row[t];
            }
        }
        let out = Tensor::scalar(total / lit::<S>(count as f64));
        let rg = self.rg(&[logits]);
        self.push(
            out,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
            rg,
        )
    }

    pub fn custom(&mut self, inputs: &[Var], op: Box<dyn CustomOp<S>>) -> Result<Var> {
        let values: Vec<&Tensor<S>> = inputs.iter().map(|v| self.value(*v)).collect();
        let out = op.forward(&values)?;
        let rg = self.rg(inputs);
        self.push(
            out,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            rg,
        )
    }

    /// Reverse pass from a scalar root. Gradients are added to whatever the
    /// buffers already hold.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).numel() != 1 {
            return Err(Error::contract(format!(
                "backward from non-scalar of shape {:?}",
                self.value(root).shape()
            )));
        }
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        // intermediate buffers are per-pass; only leaves keep accumulating
        for (node, grad) in self.nodes.iter().zip(self.grads.iter_mut()) {
            if !matches!(node.op, Op::Leaf) {
                *grad = None;
            }
        }
        let seed = Tensor::full(self.value(root).shape().to_vec(), S::one());
        accumulate(&mut self.grads[root.0], seed);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            let contributions = self.local_grads(i, &g);
            self.grads[i] = Some(g);
            for (var, contribution) in contributions {
                if self.nodes[var.0].requires_grad {
                    accumulate(&mut self.grads[var.0], contribution);
                }
            }
        }
        Ok(())
    }

    /// Drops every accumulated gradient.
    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    fn local_grads(&self, i: usize, g: &Tensor<S>) -> Vec<(Var, Tensor<S>)> {
        let node = &self.nodes[i];
        let want = |v: Var| self.nodes[v.0].requires_grad;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = dims2(ta);
                let n = tb.cols();
                if want(*a) {
                    // dA = G · Bᵀ
                    let mut da = vec![S::zero(); m * k];
                    S::gemm_strided(m, n, k, S::one(), g.data(), n as isize, 1, tb.data(), 1, n as isize, S::zero(), &mut da);
                    out.push((*a, Tensor::new(ta.shape().to_vec(), da).unwrap()));
                }
                if want(*b) {
                    // dB = Aᵀ · G
                    let mut db = vec![S::zero(); k * n];
                    S::gemm_strided(k, m, n, S::one(), ta.data(), 1, k as isize, g.data(), n as isize, 1, S::zero(), &mut db);
                    out.push((*b, Tensor::new(tb.shape().to_vec(), db).unwrap()));
                }
            }
            Op::Add(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.clone()));
            }
            Op::Sub(a, b) => {
                out.push((*a, g.clone()));
                if want(*b) {
                    out.push((*b, g.map(|v| -v)));
                }
            }
            Op::Mul(a, b) => {
                if want(*a) {
                    out.push((*a, g.zip_map(self.value(*b), |x, y| x * y).unwrap()));
                }
                if want(*b) {
                    out.push((*b, g.zip_map(self.value(*a), |x, y| x * y).unwrap()));
                }
            }
            Op::AddRow(x, row) => {
                out.push((*x, g.clone()));
                if want(*row) {
                    let tr = self.value(*row);
                    out.push((*row, Tensor::new(tr.shape().to_vec(), column_sums(g)).unwrap()));
                }
            }
            Op::Scale(x, c) => out.push((*x, g.map(|v| v * *c))),
            Op::Relu(x) => {
                let gx = g
                    .zip_map(self.value(*x), |gv, xv| if xv > S::zero() { gv } else { S::zero() })
                    .unwrap();
                out.push((*x, gx));
            }
            Op::SoftmaxRows(x) => {
                let y = &node.value;
                let n = y.cols();
                let mut gx = vec![S::zero(); y.numel()];
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot: S = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for c in 0..n {
                        gx[r * n + c] = yr[c] * (gr[c] - dot);
                    }
                }
                out.push((*x, Tensor::new(y.shape().to_vec(), gx).unwrap()));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let tx = self.value(*x);
                let (m, n) = dims2(tx);
                let tg = self.value(*gain);
                if want(*x) {
                    let nf = lit::<S>(n as f64);
                    let mut gx = vec![S::zero(); m * n];
                    for r in 0..m {
                        let gr = g.row(r);
                        let hr = &xhat[r * n..(r + 1) * n];
                        let dh: Vec<S> = (0..n).map(|c| gr[c] * tg.data()[c]).collect();
                        let mean_dh = dh.iter().copied().sum::<S>() / nf;
                        let mean_dh_h = dh.iter().zip(hr).map(|(&a, &b)| a * b).sum::<S>() / nf;
                        for c in 0..n {
                            gx[r * n + c] = inv_std[r] * (dh[c] - mean_dh - hr[c] * mean_dh_h);
                        }
                    }
                    out.push((*x, Tensor::new(tx.shape().to_vec(), gx).unwrap()));
                }
                if want(*gain) {
                    let mut gg = vec![S::zero(); n];
                    for (i, (&gv, &h)) in g.data().iter().zip(xhat).enumerate() {
                        gg[i % n] = gg[i % n] + gv * h;
                    }
                    out.push((*gain, Tensor::new(tg.shape().to_vec(), gg).unwrap()));
                }
                if want(*bias) {
                    let tb = self.value(*bias);
                    out.push((*bias, Tensor::new(tb.shape().to_vec(), column_sums(g)).unwrap()));
                }
            }
            Op::MeanSegments { x, seg } => {
                let tx = self.value(*x);
                let n = tx.cols();
                let inv = S::one() / lit::<S>(*seg as f64);
                let mut gx = Vec::with_capacity(tx.numel());
                for r in 0..tx.rows() {
                    gx.extend(g.row(r / seg).iter().map(|&v| v * inv));
                }
                debug_assert_eq!(gx.len(), tx.rows() * n);
                out.push((*x, Tensor::new(tx.shape().to_vec(), gx).unwrap()));
            }
            Op::RepeatRows { x, times } => {
                let tx = self.value(*x);
                let n = tx.cols();
                let mut gx = vec![S::zero(); tx.numel()];
                for r in 0..g.rows() {
                    let dst = &mut gx[(r / times) * n..(r / times + 1) * n];
                    for (d, &v) in dst.iter_mut().zip(g.row(r)) {
                        *d = *d + v;
                    }
                }
                out.push((*x, Tensor::new(tx.shape().to_vec(), gx).unwrap()));
            }
            Op::GradReverse { x, lambda } => out.push((*x, g.map(|v| -(*lambda) * v))),
            Op::Attention {
                q,
                k,
                v,
                seg,
                scale,
                probs,
            } => {
                let (tq, tk, tv) = (self.value(*q), self.value(*k), self.value(*v));
                let (m, dk) = dims2(tq);
                let dv = tv.cols();
                let seg = *seg;
                let mut gq = vec![S::zero(); m * dk];
                let mut gk = vec![S::zero(); m * dk];
                let mut gv = vec![S::zero(); m * dv];
                let mut dp = vec![S::zero(); seg * seg];
                for b in 0..m / seg {
                    let o = b * seg;
                    let p = &probs[o * seg..(o + seg) * seg];
                    let go = &g.data()[o * dv..(o + seg) * dv];
                    // dV = Pᵀ · dO
                    S::gemm_strided(seg, seg, dv, S::one(), p, 1, seg as isize, go, dv as isize, 1, S::zero(), &mut gv[o * dv..(o + seg) * dv]);
                    // dP = dO · Vᵀ
                    S::gemm_strided(seg, dv, seg, S::one(), go, dv as isize, 1, &tv.data()[o * dv..(o + seg) * dv], 1, dv as isize, S::zero(), &mut dp);
                    // dS = P ⊙ (dP − rowsum(dP ⊙ P)), scaled into the logits
                    for r in 0..seg {
                        let pr = &p[r * seg..(r + 1) * seg];
                        let dr = &mut dp[r * seg..(r + 1) * seg];
                        let dot: S = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
                        for c in 0..seg {
                            dr[c] = pr[c] * (dr[c] - dot) * *scale;
                        }
                    }
                    let qb = &tq.data()[o * dk..(o + seg) * dk];
                    let kb = &tk.data()[o * dk..(o + seg) * dk];
                    // dQ = dS · K,  dK = dSᵀ · Q
                    S::gemm(seg, seg, dk, S::one(), &dp, kb, S::zero(), &mut gq[o * dk..(o + seg) * dk]);
                    S::gemm_strided(seg, seg, dk, S::one(), &dp, 1, seg as isize, qb, dk as isize, 1, S::zero(), &mut gk[o * dk..(o + seg) * dk]);
                }
                if want(*q) {
                    out.push((*q, Tensor::new(tq.shape().to_vec(), gq).unwrap()));
                }
                if want(*k) {
                    out.push((*k, Tensor::new(tk.shape().to_vec(), gk).unwrap()));
                }
                if want(*v) {
                    out.push((*v, Tensor::new(tv.shape().to_vec(), gv).unwrap()));
                }
            }
            Op::ConcatCols(parts) => {
                let total = g.cols();
                let mut offset = 0;
                for p in parts {
                    let tp = self.value(*p);
                    let w = tp.cols();
                    if want(*p) {
                        let mut gp = Vec::with_capacity(tp.numel());
                        for r in 0..g.rows() {
                            gp.extend_from_slice(&g.data()[r * total + offset..r * total + offset + w]);
                        }
                        out.push((*p, Tensor::new(tp.shape().to_vec(), gp).unwrap()));
                    }
                    offset += w;
                }
            }
            Op::Transpose(x) => {
                let tx = self.value(*x);
                out.push((*x, g.transpose().reshape(tx.shape().to_vec()).unwrap()));
            }
            Op::Sum(x) => {
                let tx = self.value(*x);
                out.push((*x, Tensor::full(tx.shape().to_vec(), g.item())));
            }
            Op::Mean(x) => {
                let tx = self.value(*x);
                let v = g.item() / lit::<S>(tx.numel() as f64);
                out.push((*x, Tensor::full(tx.shape().to_vec(), v)));
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                let tl = self.value(*logits);
                let c = tl.cols();
                let w = g.item() / lit::<S>(*count as f64);
                let mut gl = vec![S::zero(); tl.numel()];
                for (r, target) in targets.iter().enumerate() {
                    if let Some(t) = *target {
                        for j in 0..c {
                            gl[r * c + j] = probs[r * c + j] * w;
                        }
                        gl[r * c + t] = gl[r * c + t] - w;
                    }
                }
                out.push((*logits, Tensor::new(tl.shape().to_vec(), gl).unwrap()));
            }
            Op::Custom { inputs, op } => {
                let values: Vec<&Tensor<S>> = inputs.iter().map(|v| self.value(*v)).collect();
                let grads = op.backward(&values, &node.value, g);
                out.extend(inputs.iter().copied().zip(grads));
            }
        }
        out
    }
}

fn accumulate<S: Scalar>(slot: &mut Option<Tensor<S>>, contribution: Tensor<S>) {
    match slot {
        Some(existing) => {
            assert_eq!(existing.shape(), contribution.shape(), "gradient shape mismatch");
            for (a, &b) in existing.data_mut().iter_mut().zip(contribution.data()) {
                *a = *a + b;
            }
        }
        None => *slot = Some(contribution),
    }
}

fn column_sums<S: Scalar>(g: &Tensor<S>) -> Vec<S> {
    let n = g.cols();
    let mut sums = vec![S::zero(); n];
    for (i, &v) in g.data().iter().enumerate() {
        sums[i % n] = sums[i % n] + v;
    }
    sums
}

/// Numerically stable softmax of one row, written back in place.
pub(crate) fn softmax_in_place<S: Scalar>(row: &mut [S]) {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    let mut total = S::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total = total + *v;
    }
    for v in row.iter_mut() {
        *v = *v / total;
    }
}

fn op_name<S: Scalar>(op: &Op<S>) -> &str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul(..) => "matmul",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::AddRow(..) => "add_row",
        Op::Scale(..) => "scale",
        Op::Relu(..) => "relu",
        Op::SoftmaxRows(..) => "softmax_rows",
        Op::LayerNorm { .. } => "layer_norm",
        Op::MeanSegments { .. } => "mean_segments",
        Op::RepeatRows { .. } => "repeat_rows",
        Op::GradReverse { .. } => "grad_reverse",
        Op::Attention { .. } => "attention",
        Op::ConcatCols(..) => "concat_cols",
        Op::Transpose(..) => "transpose",
        Op::Sum(..) => "sum",
        Op::Mean(..) => "mean",
        Op::CrossEntropy { .. } => "cross_entropy",
        Op::Custom { op, .. } => op.name(),
    }
}
