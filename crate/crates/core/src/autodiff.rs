//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! Every operation appends one node holding its forward value. Variables
//! are plain indices into the tape, so they are `Copy` and cheap to thread
//! through recurrent loops. [`Tape::backward`] walks the records in reverse
//! order once and deposits parameter gradients into a [`Gradients`] buffer.

use std::collections::HashMap;

use crate::error::{Result, SrnnError};
use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::{sigmoid, Scalar, Tensor};

/// Added inside the logarithm of the cross-entropy loss.
pub const CROSS_ENTROPY_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Weights of one LSTM cell as tape variables, gate order input, forget,
/// output, candidate.
#[derive(Debug, Clone, Copy)]
pub struct LstmVars {
    pub w: [Var; 4],
    pub u: [Var; 4],
    pub b: [Var; 4],
}

impl LstmVars {
    fn key(&self) -> [Var; 12] {
        let mut k = [Var(0); 12];
        k[..4].copy_from_slice(&self.w);
        k[4..8].copy_from_slice(&self.u);
        k[8..].copy_from_slice(&self.b);
        k
    }
}

/// Gate weights stacked in gate order: `w` is `[4H × in]`, `u` is
/// `[4H × H]`, `b` is `[4H]`.
#[derive(Debug)]
struct FusedLstm<S> {
    w: Tensor<S>,
    u: Tensor<S>,
    b: Tensor<S>,
}

#[derive(Debug)]
struct LstmRecord<S> {
    x: Var,
    h: Var,
    c: Var,
    weights: LstmVars,
    /// `[B × 4H]`: i, f, o, g after their nonlinearities.
    gates: Tensor<S>,
    tanh_c: Tensor<S>,
}

/// Per-step gate gradients of one set of LSTM weights, reduced into
/// weight gradients with one product each.
struct PendingLstm<S> {
    weights: LstmVars,
    /// Highest tape index among the weights; flushed before reaching it.
    flush_at: usize,
    dz: Vec<Tensor<S>>,
    xs: Vec<Var>,
    hs: Vec<Var>,
}

#[derive(Debug)]
enum Op<S> {
    Const,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, S),
    Sigmoid(Var),
    Tanh(Var),
    Softmax(Var),
    Concat { parts: Vec<Var>, axis: usize },
    SumList(Vec<Var>),
    Slice { src: Var, axis: usize, start: usize },
    SumAll(Var),
    Euclidean { pred: Var, diff: Tensor<S> },
    CrossEntropy { probs: Var, classes: Vec<usize> },
    Lstm(Box<LstmRecord<S>>),
}

#[derive(Debug)]
struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
}

/// Append-only record of a forward computation.
#[derive(Debug)]
pub struct Tape<S = f64> {
    nodes: Vec<Node<S>>,
    param_vars: HashMap<ParamId, Var>,
    fused: HashMap<[Var; 12], FusedLstm<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            fused: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        self.push(t, Op::Const)
    }

    /// Records parameter `id`; repeated calls return the same variable.
    pub fn param(&mut self, store: &ParamStore<S>, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).value.clone(), Op::Param(id));
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`, the layout used by `[out × in]` weight matrices.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul_t(self.value(b))?;
        Ok(self.push(out, Op::MatMulT(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).mul(self.value(b))?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let out = self.value(a).add_bias(self.value(bias))?;
        Ok(self.push(out, Op::AddBias(a, bias)))
    }

    pub fn scale(&mut self, a: Var, s: S) -> Var {
        let out = self.value(a).scale(s);
        self.push(out, Op::Scale(a, s))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).sigmoid();
        self.push(out, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).tanh();
        self.push(out, Op::Tanh(a))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).softmax()?;
        Ok(self.push(out, Op::Softmax(a)))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let values: Vec<&Tensor<S>> = parts.iter().map(|&v| self.value(v)).collect();
        let out = Tensor::concat(&values, axis)?;
        Ok(self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    /// Left fold of `add` in list order.
    pub fn sum_list(&mut self, parts: &[Var]) -> Result<Var> {
        let (first, rest) = parts
            .split_first()
            .ok_or_else(|| SrnnError::Input("sum_list of an empty list".into()))?;
        let mut acc = self.value(*first).clone();
        for &p in rest {
            acc = acc.add(self.value(p))?;
        }
        Ok(self.push(acc, Op::SumList(parts.to_vec())))
    }

    pub fn slice(&mut self, src: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let out = self.value(src).slice(axis, start, len)?;
        Ok(self.push(out, Op::Slice { src, axis, start }))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum_all());
        self.push(out, Op::SumAll(a))
    }

    /// `½ Σ (pred − target)²`; the gradient with respect to `pred` is
    /// `pred − target`.
    pub fn euclidean_loss(&mut self, pred: Var, target: &Tensor<S>) -> Result<Var> {
        let diff = self.value(pred).sub(target)?;
        let loss = diff.sum_squares() * S::lit(0.5);
        Ok(self.push(Tensor::scalar(loss), Op::Euclidean { pred, diff }))
    }

    /// `Σ_rows −ln(p[row, class_row] + ε)`. A rank-1 `probs` is one row.
    pub fn cross_entropy_loss(&mut self, probs: Var, classes: &[usize]) -> Result<Var> {
        let p = self.value(probs);
        let width = *p
            .shape()
            .last()
            .ok_or_else(|| SrnnError::Input("cross entropy of a rank-0 tensor".into()))?;
        let rows = p.numel().checked_div(width).unwrap_or(0);
        if rows != classes.len() {
            return Err(SrnnError::Input(format!(
                "cross entropy: {rows} probability rows but {} class indices",
                classes.len()
            )));
        }
        let eps = S::lit(CROSS_ENTROPY_EPS);
        let mut loss = S::zero();
        for (r, &c) in classes.iter().enumerate() {
            if c >= width {
                return Err(SrnnError::Input(format!(
                    "class index {c} out of range for {width} classes"
                )));
            }
            loss = loss - (p.data()[r * width + c] + eps).ln();
        }
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                probs,
                classes: classes.to_vec(),
            },
        ))
    }

    /// One LSTM step on a `[batch × in]` input with `[batch × hidden]`
    /// state. Returns a `[batch × 2·hidden]` node holding `[h' ; c']`.
    ///
    /// i = σ(x Wᵢᵀ + h Uᵢᵀ + bᵢ), likewise f and o; g = tanh(…);
    /// c' = f ⊙ c + i ⊙ g; h' = o ⊙ tanh(c').
    pub fn lstm(&mut self, x: Var, h: Var, c: Var, weights: LstmVars) -> Result<Var> {
        let key = weights.key();
        if !self.fused.contains_key(&key) {
            let stack = |vars: &[Var; 4]| {
                let parts: Vec<&Tensor<S>> = vars.iter().map(|&v| self.value(v)).collect();
                Tensor::concat(&parts, 0)
            };
            let fused = FusedLstm {
                w: stack(&weights.w)?,
                u: stack(&weights.u)?,
                b: stack(&weights.b)?,
            };
            self.fused.insert(key, fused);
        }
        let fz = &self.fused[&key];
        let xv = self.value(x);
        let hv = self.value(h);
        let cv = self.value(c);
        if hv.shape() != cv.shape() || hv.rank() != 2 || xv.rank() != 2 {
            return Err(SrnnError::shape("lstm", hv.shape(), cv.shape()));
        }
        if xv.shape()[0] != hv.shape()[0] {
            return Err(SrnnError::shape("lstm", xv.shape(), hv.shape()));
        }
        let (rows, hidden) = (hv.shape()[0], hv.shape()[1]);
        if fz.w.shape()[0] != 4 * hidden || fz.b.numel() != 4 * hidden {
            return Err(SrnnError::shape("lstm", fz.w.shape(), hv.shape()));
        }
        let mut z = xv.matmul_t(&fz.w)?;
        z.add_assign(&hv.matmul_t(&fz.u)?)?;
        let mut gates = z.add_bias(&fz.b)?;
        let mut tanh_c = Tensor::zeros(&[rows, hidden]);
        let mut out = Tensor::zeros(&[rows, 2 * hidden]);
        for r in 0..rows {
            let gr = &mut gates.data_mut()[r * 4 * hidden..(r + 1) * 4 * hidden];
            let (ifo, g) = gr.split_at_mut(3 * hidden);
            ifo.iter_mut().for_each(|v| *v = sigmoid(*v));
            g.iter_mut().for_each(|v| *v = v.tanh());
            let cr = &cv.data()[r * hidden..(r + 1) * hidden];
            let tr = &mut tanh_c.data_mut()[r * hidden..(r + 1) * hidden];
            let or = &mut out.data_mut()[r * 2 * hidden..(r + 1) * 2 * hidden];
            for j in 0..hidden {
                let (i, f, o, g) = (ifo[j], ifo[hidden + j], ifo[2 * hidden + j], g[j]);
                let c_new = f * cr[j] + i * g;
                let t = c_new.tanh();
                tr[j] = t;
                or[j] = o * t;
                or[hidden + j] = c_new;
            }
        }
        Ok(self.push(
            out,
            Op::Lstm(Box::new(LstmRecord {
                x,
                h,
                c,
                weights,
                gates,
                tanh_c,
            })),
        ))
    }

    /// Reverse sweep from a scalar `loss`, adding parameter gradients into
    /// `grads`. Parameters the loss does not depend on are left untouched.
    pub fn backward(&self, loss: Var, grads: &mut Gradients<S>) -> Result<()> {
        let loss_value = self.value(loss);
        if loss_value.numel() != 1 {
            return Err(SrnnError::Input(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_value.shape()
            )));
        }
        let mut adj: Vec<Option<Tensor<S>>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(Tensor::filled(loss_value.shape(), S::one()));
        let mut pending: Vec<PendingLstm<S>> = Vec::new();

        for idx in (0..=loss.0).rev() {
            let mut k = 0;
            while k < pending.len() {
                if pending[k].flush_at >= idx {
                    let p = pending.swap_remove(k);
                    self.flush_lstm(p, &mut adj)?;
                } else {
                    k += 1;
                }
            }
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Const => {}
                Op::Param(id) => grads.add(*id, g)?,
                Op::MatMul(a, b) => {
                    let da = g.matmul_t(self.value(*b))?;
                    let db = self.value(*a).t_matmul(&g)?;
                    deposit(&mut adj, *a, da)?;
                    deposit(&mut adj, *b, db)?;
                }
                Op::MatMulT(a, b) => {
                    let da = g.matmul(self.value(*b))?;
                    let db = g.t_matmul(self.value(*a))?;
                    deposit(&mut adj, *a, da)?;
                    deposit(&mut adj, *b, db)?;
                }
                Op::Add(a, b) => {
                    deposit(&mut adj, *a, g.clone())?;
                    deposit(&mut adj, *b, g)?;
                }
                Op::Sub(a, b) => {
                    deposit(&mut adj, *b, g.scale(-S::one()))?;
                    deposit(&mut adj, *a, g)?;
                }
                Op::Mul(a, b) => {
                    let da = g.mul(self.value(*b))?;
                    let db = g.mul(self.value(*a))?;
                    deposit(&mut adj, *a, da)?;
                    deposit(&mut adj, *b, db)?;
                }
                Op::AddBias(a, bias) => {
                    deposit(&mut adj, *bias, g.sum_rows()?)?;
                    deposit(&mut adj, *a, g)?;
                }
                Op::Scale(a, s) => deposit(&mut adj, *a, g.scale(*s))?,
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    let da = g.mul(&y.map(|v| v * (S::one() - v)))?;
                    deposit(&mut adj, *a, da)?;
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    let da = g.mul(&y.map(|v| S::one() - v * v))?;
                    deposit(&mut adj, *a, da)?;
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let width = *y.shape().last().unwrap_or(&1);
                    let mut da = g.clone();
                    if width > 0 {
                        for (drow, yrow) in da.data_mut().chunks_mut(width).zip(y.data().chunks(width)) {
                            let dot = drow.iter().zip(yrow).fold(S::zero(), |acc, (&d, &p)| acc + d * p);
                            for (d, &p) in drow.iter_mut().zip(yrow) {
                                *d = p * (*d - dot);
                            }
                        }
                    }
                    deposit(&mut adj, *a, da)?;
                }
                Op::Concat { parts, axis } => {
                    let mut start = 0;
                    for &p in parts {
                        let len = self.value(p).shape()[*axis];
                        deposit(&mut adj, p, g.slice(*axis, start, len)?)?;
                        start += len;
                    }
                }
                Op::SumList(parts) => {
                    for &p in parts {
                        deposit(&mut adj, p, g.clone())?;
                    }
                }
                Op::Slice { src, axis, start } => {
                    let src_shape = self.value(*src).shape();
                    let da = scatter_slice(&g, src_shape, *axis, *start)?;
                    deposit(&mut adj, *src, da)?;
                }
                Op::SumAll(a) => {
                    let shape = self.value(*a).shape();
                    deposit(&mut adj, *a, Tensor::filled(shape, g.item()))?;
                }
                Op::Euclidean { pred, diff } => {
                    deposit(&mut adj, *pred, diff.scale(g.item()))?;
                }
                Op::CrossEntropy { probs, classes } => {
                    let p = self.value(*probs);
                    let width = *p.shape().last().unwrap_or(&1);
                    let eps = S::lit(CROSS_ENTROPY_EPS);
                    let mut dp = Tensor::zeros(p.shape());
                    for (r, &c) in classes.iter().enumerate() {
                        let at = r * width + c;
                        dp.data_mut()[at] = -g.item() / (p.data()[at] + eps);
                    }
                    deposit(&mut adj, *probs, dp)?;
                }
                Op::Lstm(rec) => self.lstm_backward(rec, &g, &mut adj, &mut pending)?,
            }
        }
        Ok(())
    }

    fn lstm_backward(
        &self,
        rec: &LstmRecord<S>,
        g: &Tensor<S>,
        adj: &mut [Option<Tensor<S>>],
        pending: &mut Vec<PendingLstm<S>>,
    ) -> Result<()> {
        let (rows, hidden) = (rec.tanh_c.shape()[0], rec.tanh_c.shape()[1]);
        let one = S::one();
        let cv = self.value(rec.c);
        let mut dz = Tensor::zeros(&[rows, 4 * hidden]);
        let mut dc_prev = Tensor::zeros(&[rows, hidden]);
        for r in 0..rows {
            let gr = &g.data()[r * 2 * hidden..(r + 1) * 2 * hidden];
            let ga = &rec.gates.data()[r * 4 * hidden..(r + 1) * 4 * hidden];
            let tr = &rec.tanh_c.data()[r * hidden..(r + 1) * hidden];
            let cr = &cv.data()[r * hidden..(r + 1) * hidden];
            let dzr = &mut dz.data_mut()[r * 4 * hidden..(r + 1) * 4 * hidden];
            let dcr = &mut dc_prev.data_mut()[r * hidden..(r + 1) * hidden];
            for j in 0..hidden {
                let (i, f, o, gg) = (ga[j], ga[hidden + j], ga[2 * hidden + j], ga[3 * hidden + j]);
                let (dh, t) = (gr[j], tr[j]);
                let dc = gr[hidden + j] + dh * o * (one - t * t);
                dzr[j] = dc * gg * (i * (one - i));
                dzr[hidden + j] = dc * cr[j] * (f * (one - f));
                dzr[2 * hidden + j] = dh * t * (o * (one - o));
                dzr[3 * hidden + j] = dc * i * (one - gg * gg);
                dcr[j] = dc * f;
            }
        }
        let fz = &self.fused[&rec.weights.key()];
        deposit(adj, rec.x, dz.matmul(&fz.w)?)?;
        deposit(adj, rec.h, dz.matmul(&fz.u)?)?;
        deposit(adj, rec.c, dc_prev)?;
        let key = rec.weights.key();
        match pending.iter_mut().find(|p| p.weights.key() == key) {
            Some(p) => {
                p.dz.push(dz);
                p.xs.push(rec.x);
                p.hs.push(rec.h);
            }
            None => pending.push(PendingLstm {
                weights: rec.weights,
                flush_at: key.iter().map(|v| v.0).max().unwrap_or(0),
                dz: vec![dz],
                xs: vec![rec.x],
                hs: vec![rec.h],
            }),
        }
        Ok(())
    }

    fn flush_lstm(&self, p: PendingLstm<S>, adj: &mut [Option<Tensor<S>>]) -> Result<()> {
        let dz = Tensor::concat(&p.dz.iter().collect::<Vec<_>>(), 0)?;
        let xs = Tensor::concat(&p.xs.iter().map(|&v| self.value(v)).collect::<Vec<_>>(), 0)?;
        let hs = Tensor::concat(&p.hs.iter().map(|&v| self.value(v)).collect::<Vec<_>>(), 0)?;
        let dw = dz.t_matmul(&xs)?;
        let du = dz.t_matmul(&hs)?;
        let db = dz.sum_rows()?;
        let hidden = db.numel() / 4;
        for k in 0..4 {
            deposit(adj, p.weights.w[k], dw.slice(0, k * hidden, hidden)?)?;
            deposit(adj, p.weights.u[k], du.slice(0, k * hidden, hidden)?)?;
            deposit(adj, p.weights.b[k], db.slice(0, k * hidden, hidden)?)?;
        }
        Ok(())
    }

    /// Runs [`Tape::backward`] and adds the result to the store's
    /// accumulators.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore<S>) -> Result<()> {
        let mut grads = Gradients::new(store.len());
        self.backward(loss, &mut grads)?;
        store.accumulate(&grads)
    }
}

fn deposit<S: Scalar>(adj: &mut [Option<Tensor<S>>], v: Var, g: Tensor<S>) -> Result<()> {
    match &mut adj[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

fn scatter_slice<S: Scalar>(g: &Tensor<S>, src_shape: &[usize], axis: usize, start: usize) -> Result<Tensor<S>> {
    let outer: usize = src_shape[..axis].iter().product();
    let inner: usize = src_shape[axis + 1..].iter().product();
    let dim = src_shape[axis];
    let len = g.shape()[axis];
    let mut out = Tensor::zeros(src_shape);
    for o in 0..outer {
        let dst = o * dim * inner + start * inner;
        let src = o * len * inner;
        out.data_mut()[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
    }
    Ok(out)
}
