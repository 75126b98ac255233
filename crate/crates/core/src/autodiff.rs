//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every op appends a node whose inputs are earlier nodes, so the node order
//! is already a topological order and the backward sweep is a single reverse
//! pass. Leaves are either named parameters, differentiable inputs (for
//! attacks) or constants; nodes that cannot reach a differentiable leaf are
//! skipped during backward.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeometry};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::{log_softmax_row, softmax_row, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    Silu(Var),
    Reshape(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeometry,
    },
    Sum(Var),
    Mean(Var),
    /// Saved softmax probabilities.
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    /// Saved softmaxes of both arguments and per-row divergences.
    KlDiv {
        p: Var,
        q: Var,
        p_probs: Vec<T>,
        q_probs: Vec<T>,
        log_ratio: Vec<T>,
        row_kl: Vec<T>,
    },
    Pick {
        x: Var,
        cols: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of primitive operations.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: Vec<(String, Var)>,
    consumed: bool,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
    params: Vec<(String, Var)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to `var`; zeros when the loss does not depend on it.
    pub fn wrt(&self, var: Var) -> Tensor<T> {
        match self.grads.get(var.0).and_then(|g| g.as_ref()) {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.shapes[var.0].clone()),
        }
    }

    /// Gradients of every parameter registered with [`Tape::param`], keyed by name.
    pub fn params(&self) -> BTreeMap<String, Tensor<T>> {
        self.params
            .iter()
            .map(|(name, v)| (name.clone(), self.wrt(*v)))
            .collect()
    }

    pub fn param(&self, name: &str) -> Result<Tensor<T>> {
        self.params
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| self.wrt(*v))
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }
}

fn shape_err<T>(op: &'static str, a: &[usize], b: &[usize]) -> Result<T> {
    Err(Error::shape(op, format!("{a:?} vs {b:?}")))
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: Vec::new(),
            consumed: false,
        }
    }

    /// Clears all recorded nodes so the tape can be reused.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.params.clear();
        self.consumed = false;
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

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A differentiable leaf that is not a named parameter.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// A differentiable leaf whose gradient is reported under `name`.
    pub fn param(&mut self, name: impl Into<String>, t: Tensor<T>) -> Var {
        let v = self.push(t, Op::Leaf, true);
        self.params.push((name.into(), v));
        v
    }

    /// Registers every tensor of a store as a named parameter.
    pub fn params_from(&mut self, store: &ParamStore<T>) -> BTreeMap<String, Var> {
        store
            .iter()
            .map(|(name, t)| (name.to_string(), self.param(name, t.clone())))
            .collect()
    }

    /// Registers every tensor of a store as a constant.
    pub fn constants_from(&mut self, store: &ParamStore<T>) -> BTreeMap<String, Var> {
        store
            .iter()
            .map(|(name, t)| (name.to_string(), self.constant(t.clone())))
            .collect()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return shape_err("matmul", sa, sb);
        }
        let out = matmul(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        mk: fn(Var, Var) -> Op<T>,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return shape_err(op, ta.shape(), tb.shape());
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::checked(op, ta.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, mk(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    /// Adds a row vector `bias[n]` to every row of `a[m,n]`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(bias));
        if ta.rank() != 2 || tb.rank() != 1 || ta.shape()[1] != tb.shape()[0] {
            return shape_err("add_row", ta.shape(), tb.shape());
        }
        let n = tb.numel();
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + tb.data()[i % n])
            .collect();
        let out = Tensor::checked("add_row", ta.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(bias);
        Ok(self.push(out, Op::AddRow(a, bias), rg))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        let out = self.value(a).scale(s)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Scale(a, s), rg))
    }

    /// Elementwise `x · sigmoid(x)`.
    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let out = silu(self.value(a))?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Silu(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    /// Direct 2-D convolution of NCHW `x` with `w[O,C,k,k]` and `b[O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, padding: usize) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        let (sx, sw) = (tx.shape(), tw.shape());
        if sx.len() != 4
            || sw.len() != 4
            || sx[1] != sw[1]
            || sw[2] != sw[3]
            || tb.shape() != [sw[0]]
            || stride == 0
            || sx[2] + 2 * padding < sw[2]
            || sx[3] + 2 * padding < sw[3]
        {
            return shape_err("conv2d", sx, sw);
        }
        let geom = ConvGeometry {
            batch: sx[0],
            in_channels: sx[1],
            height: sx[2],
            width: sx[3],
            out_channels: sw[0],
            kernel: sw[2],
            stride,
            padding,
        };
        let data = kernels::conv2d_forward(&geom, tx.data(), tw.data(), tb.data());
        let out = Tensor::checked(
            "conv2d",
            vec![geom.batch, geom.out_channels, geom.out_height(), geom.out_width()],
            data,
        )?;
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(out, Op::Conv2d { x, w, b, geom }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::checked("sum", vec![], vec![self.value(a).sum()])?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Sum(a), rg))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.numel() == 0 {
            return Err(Error::InvalidArgument("mean of empty tensor".into()));
        }
        let out = Tensor::checked("mean", vec![], vec![t.sum() / T::of(t.numel() as f64)])?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Mean(a), rg))
    }

    /// Batch mean of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        if t.rank() != 2 || t.shape()[0] != labels.len() || t.shape()[0] == 0 {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("logits {:?} with {} labels", t.shape(), labels.len()),
            ));
        }
        let (b, c) = (t.shape()[0], t.shape()[1]);
        let mut probs = vec![T::zero(); b * c];
        let mut ls = vec![T::zero(); c];
        let mut total = T::zero();
        for (i, &y) in labels.iter().enumerate() {
            if y >= c {
                return Err(Error::LabelOutOfRange { label: y, classes: c });
            }
            log_softmax_row(t.row(i), &mut ls);
            total -= ls[y];
            for (p, &l) in probs[i * c..(i + 1) * c].iter_mut().zip(&ls) {
                *p = l.exp();
            }
        }
        let out = Tensor::checked("softmax_cross_entropy", vec![], vec![total / T::of(b as f64)])?;
        let rg = self.rg(logits);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Batch mean of `KL(softmax(p) ‖ softmax(q))`.
    pub fn kl_divergence(&mut self, p: Var, q: Var) -> Result<Var> {
        let (tp, tq) = (self.value(p), self.value(q));
        if tp.shape() != tq.shape() || tp.rank() != 2 || tp.shape()[0] == 0 {
            return shape_err("kl_divergence", tp.shape(), tq.shape());
        }
        let (b, c) = (tp.shape()[0], tp.shape()[1]);
        let mut p_probs = vec![T::zero(); b * c];
        let mut q_probs = vec![T::zero(); b * c];
        let mut log_ratio = vec![T::zero(); b * c];
        let mut row_kl = vec![T::zero(); b];
        let mut lp = vec![T::zero(); c];
        let mut lq = vec![T::zero(); c];
        for i in 0..b {
            log_softmax_row(tp.row(i), &mut lp);
            log_softmax_row(tq.row(i), &mut lq);
            let mut kl = T::zero();
            for j in 0..c {
                let pj = lp[j].exp();
                let r = lp[j] - lq[j];
                p_probs[i * c + j] = pj;
                q_probs[i * c + j] = lq[j].exp();
                log_ratio[i * c + j] = r;
                kl += pj * r;
            }
            row_kl[i] = kl;
        }
        let total = row_kl.iter().copied().sum::<T>() / T::of(b as f64);
        let out = Tensor::checked("kl_divergence", vec![], vec![total])?;
        let rg = self.rg(p) || self.rg(q);
        Ok(self.push(
            out,
            Op::KlDiv {
                p,
                q,
                p_probs,
                q_probs,
                log_ratio,
                row_kl,
            },
            rg,
        ))
    }

    /// Gathers `x[i, cols[i]]` for each row of a `[B, C]` tensor.
    pub fn pick(&mut self, x: Var, cols: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 2 || t.shape()[0] != cols.len() {
            return Err(Error::shape(
                "pick",
                format!("{:?} with {} indices", t.shape(), cols.len()),
            ));
        }
        let c = t.shape()[1];
        let mut data = Vec::with_capacity(cols.len());
        for (i, &j) in cols.iter().enumerate() {
            if j >= c {
                return Err(Error::LabelOutOfRange { label: j, classes: c });
            }
            data.push(t.row(i)[j]);
        }
        let out = Tensor::from_parts(vec![cols.len()], data);
        let rg = self.rg(x);
        Ok(self.push(out, Op::Pick { x, cols: cols.to_vec() }, rg))
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// The tape is marked consumed afterwards; a second call without
    /// [`Tape::reset`] fails.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(Error::NotScalar(lt.shape().to_vec()));
        }
        self.consumed = true;
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..n).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let mut out = Vec::with_capacity(self.nodes.len());
        for (i, g) in grads.into_iter().enumerate() {
            out.push(match g {
                Some(data) => Some(Tensor::checked("backward", self.nodes[i].value.shape().to_vec(), data)?),
                None => None,
            });
        }
        Ok(Gradients {
            grads: out,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            params: self.params.clone(),
        })
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let acc = |v: Var, grads: &mut [Option<Vec<T>>]| -> Option<usize> {
            if !nodes[v.0].requires_grad {
                return None;
            }
            if grads[v.0].is_none() {
                grads[v.0] = Some(vec![T::zero(); nodes[v.0].value.numel()]);
            }
            Some(v.0)
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if let Some(i) = acc(*a, grads) {
                    let da = grads[i].as_mut().unwrap();
                    kernels::matmul_nt_acc(g, tb.data(), da, m, n, k);
                }
                if let Some(i) = acc(*b, grads) {
                    let db = grads[i].as_mut().unwrap();
                    kernels::matmul_tn_acc(ta.data(), g, db, m, k, n);
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(i) = acc(*v, grads) {
                        add_into(grads[i].as_mut().unwrap(), g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(i) = acc(*a, grads) {
                    add_into(grads[i].as_mut().unwrap(), g);
                }
                if let Some(i) = acc(*b, grads) {
                    for (d, &gv) in grads[i].as_mut().unwrap().iter_mut().zip(g) {
                        *d -= gv;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                if let Some(i) = acc(*a, grads) {
                    let d = grads[i].as_mut().unwrap();
                    for j in 0..g.len() {
                        d[j] += g[j] * tb[j];
                    }
                }
                if let Some(i) = acc(*b, grads) {
                    let d = grads[i].as_mut().unwrap();
                    for j in 0..g.len() {
                        d[j] += g[j] * ta[j];
                    }
                }
            }
            Op::AddRow(a, bias) => {
                if let Some(i) = acc(*a, grads) {
                    add_into(grads[i].as_mut().unwrap(), g);
                }
                if let Some(i) = acc(*bias, grads) {
                    let d = grads[i].as_mut().unwrap();
                    let n = d.len();
                    for row in g.chunks(n) {
                        add_into(d, row);
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(i) = acc(*a, grads) {
                    for (d, &gv) in grads[i].as_mut().unwrap().iter_mut().zip(g) {
                        *d += gv * *s;
                    }
                }
            }
            Op::Silu(a) => {
                let x = nodes[a.0].value.data();
                if let Some(i) = acc(*a, grads) {
                    let d = grads[i].as_mut().unwrap();
                    for j in 0..g.len() {
                        let s = kernels::sigmoid(x[j]);
                        d[j] += g[j] * s * (T::one() + x[j] * (T::one() - s));
                    }
                }
            }
            Op::Reshape(a) => {
                if let Some(i) = acc(*a, grads) {
                    add_into(grads[i].as_mut().unwrap(), g);
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                let (tx, tw) = (&nodes[x.0].value, &nodes[w.0].value);
                let ix = acc(*x, grads);
                let iw = acc(*w, grads);
                let ib = acc(*b, grads);
                let mut dx = ix.map(|i| grads[i].take().unwrap());
                let mut dw = iw.map(|i| grads[i].take().unwrap());
                let mut db = ib.map(|i| grads[i].take().unwrap());
                kernels::conv2d_backward(
                    geom,
                    tx.data(),
                    tw.data(),
                    g,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                for (i, d) in [(ix, dx), (iw, dw), (ib, db)] {
                    if let (Some(i), Some(d)) = (i, d) {
                        grads[i] = Some(d);
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(i) = acc(*a, grads) {
                    for d in grads[i].as_mut().unwrap().iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::Mean(a) => {
                if let Some(i) = acc(*a, grads) {
                    let d = grads[i].as_mut().unwrap();
                    let s = g[0] / T::of(d.len() as f64);
                    for v in d.iter_mut() {
                        *v += s;
                    }
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                if let Some(i) = acc(*logits, grads) {
                    let d = grads[i].as_mut().unwrap();
                    let b = labels.len();
                    let c = probs.len() / b;
                    let s = g[0] / T::of(b as f64);
                    for (r, &y) in labels.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == y { T::one() } else { T::zero() };
                            d[r * c + j] += s * (probs[r * c + j] - onehot);
                        }
                    }
                }
            }
            Op::KlDiv {
                p,
                q,
                p_probs,
                q_probs,
                log_ratio,
                row_kl,
            } => {
                let b = row_kl.len();
                let c = p_probs.len() / b;
                let s = g[0] / T::of(b as f64);
                if let Some(i) = acc(*p, grads) {
                    let d = grads[i].as_mut().unwrap();
                    for r in 0..b {
                        for j in 0..c {
                            let k = r * c + j;
                            d[k] += s * p_probs[k] * (log_ratio[k] - row_kl[r]);
                        }
                    }
                }
                if let Some(i) = acc(*q, grads) {
                    let d = grads[i].as_mut().unwrap();
                    for k in 0..b * c {
                        d[k] += s * (q_probs[k] - p_probs[k]);
                    }
                }
            }
            Op::Pick { x, cols } => {
                if let Some(i) = acc(*x, grads) {
                    let d = grads[i].as_mut().unwrap();
                    let c = d.len() / cols.len();
                    for (r, &j) in cols.iter().enumerate() {
                        d[r * c + j] += g[r];
                    }
                }
            }
        }
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Eager matrix product of `[m,k]` and `[k,n]`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
        return shape_err("matmul", sa, sb);
    }
    let (m, k, n) = (sa[0], sa[1], sb[1]);
    let mut c = vec![T::zero(); m * n];
    kernels::matmul_acc(a.data(), b.data(), &mut c, m, k, n);
    Tensor::checked("matmul", vec![m, n], c)
}

/// Eager elementwise SiLU.
pub fn silu<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    Tensor::checked(
        "silu",
        x.shape().to_vec(),
        x.data().iter().map(|&v| v * kernels::sigmoid(v)).collect(),
    )
}

/// Eager batch-mean cross-entropy.
pub fn softmax_cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<T> {
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    let loss = tape.softmax_cross_entropy(l, labels)?;
    tape.value(loss).item()
}

/// Eager batch-mean `KL(softmax(p) ‖ softmax(q))`.
pub fn kl_divergence<T: Scalar>(p: &Tensor<T>, q: &Tensor<T>) -> Result<T> {
    let mut tape = Tape::new();
    let pv = tape.constant(p.clone());
    let qv = tape.constant(q.clone());
    let loss = tape.kl_divergence(pv, qv)?;
    tape.value(loss).item()
}

/// Per-row softmax of logits, written into a fresh buffer.
pub fn row_softmax<T: Scalar>(logits: &Tensor<T>) -> Vec<Vec<T>> {
    let c = logits.row_len();
    (0..logits.rows())
        .map(|i| {
            let mut out = vec![T::zero(); c];
            softmax_row(logits.row(i), &mut out);
            out
        })
        .collect()
}
