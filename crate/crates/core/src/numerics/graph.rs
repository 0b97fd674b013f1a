//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] is rebuilt for every sentence. Nodes are appended in execution
//! order, so the tape is already a topological order and [`Graph::backward`]
//! simply walks it in reverse. Parameters are borrowed from a [`ParamStore`]
//! and never copied onto the tape.

use super::params::{ParamId, ParamStore};
use super::tensor::{axpy, dot, log_sum_exp, matvec_acc, softmax_values, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    Lookup {
        table: ParamId,
        row: usize,
    },
    Affine {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    MatVec {
        w: NodeId,
        x: NodeId,
    },
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Concat(Vec<NodeId>),
    Slice {
        x: NodeId,
        start: usize,
    },
    Mean(Vec<NodeId>),
    Sum(NodeId),
    SumScalars(Vec<NodeId>),
    Dot(NodeId, NodeId),
    Softmax(NodeId),
    LogSoftmax(NodeId),
    LogSoftmaxSubset {
        x: NodeId,
        idx: Vec<usize>,
    },
    Pick {
        x: NodeId,
        index: usize,
    },
    LogSumExpAt {
        x: NodeId,
        idx: Vec<usize>,
    },
    Dropout {
        x: NodeId,
        mask: Vec<f64>,
    },
    WeightedSum {
        weights: NodeId,
        items: Vec<NodeId>,
    },
    AdditiveScores {
        query: NodeId,
        keys: Vec<NodeId>,
        v: NodeId,
    },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Per-parameter gradients produced by [`Graph::backward`].
///
/// Parameters the loss does not depend on have no entry and read as zero.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn empty(n_params: usize) -> Self {
        Gradients {
            grads: vec![None; n_params],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    /// Gradient of `id`, materialising zeros for untouched parameters.
    pub fn dense(&self, id: ParamId, store: &ParamStore) -> Tensor {
        match self.get(id) {
            Some(t) => t.clone(),
            None => Tensor::zeros(store.get(id).shape()),
        }
    }

    pub fn is_touched(&self, id: ParamId) -> bool {
        self.get(id).is_some()
    }

    pub fn touched(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.grads
            .iter()
            .enumerate()
            .filter(|(_, g)| g.is_some())
            .map(|(i, _)| ParamId(i))
    }

    /// Adds `other` into `self`. Parameter sets may differ.
    pub fn accumulate(&mut self, other: &Gradients) {
        if self.grads.len() < other.grads.len() {
            self.grads.resize(other.grads.len(), None);
        }
        for (mine, theirs) in self.grads.iter_mut().zip(&other.grads) {
            if let Some(t) = theirs {
                match mine {
                    Some(m) => axpy(1.0, t.data(), m.data_mut()),
                    None => *mine = Some(t.clone()),
                }
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.grads.iter_mut().flatten() {
            t.data_mut().iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .map(Tensor::sq_norm)
            .sum::<f64>()
            .sqrt()
    }

    fn slot(&mut self, id: ParamId, store: &ParamStore) -> &mut Tensor {
        self.grads[id.0].get_or_insert_with(|| Tensor::zeros(store.get(id).shape()))
    }
}

/// A recorded forward computation.
pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_nodes: Vec<Option<NodeId>>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Graph {
            params,
            nodes: Vec::new(),
            param_nodes: vec![None; params.len()],
        }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        match self.nodes[id.0].op {
            Op::Param(p) => self.params.get(p),
            _ => &self.nodes[id.0].value,
        }
    }

    pub fn values(&self, id: NodeId) -> &[f64] {
        self.value(id).data()
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.values(id)[0]
    }

    fn dim(&self, id: NodeId) -> usize {
        self.value(id).len()
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn ng(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn input(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Input, t, false)
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(n) = self.param_nodes[id.0] {
            return n;
        }
        let n = self.push(Op::Param(id), Tensor::zeros(&[0]), true);
        self.param_nodes[id.0] = Some(n);
        n
    }

    /// Row `row` of a `[rows, cols]` parameter table.
    pub fn lookup(&mut self, table: ParamId, row: usize) -> Result<NodeId> {
        let t = self.params.get(table);
        if row >= t.rows() {
            return Err(Error::shape(
                "lookup",
                format!("row {row} out of range for table {:?}", t.shape()),
            ));
        }
        let v = Tensor::vector(t.row(row).to_vec());
        Ok(self.push(Op::Lookup { table, row }, v, true))
    }

    /// `W x + b`.
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (wt, xt, bt) = (self.value(w), self.value(x), self.value(b));
        if wt.shape().len() != 2 || wt.shape()[1] != xt.len() || wt.shape()[0] != bt.len() {
            return Err(Error::shape(
                "affine",
                format!(
                    "W {:?} cannot map x {:?} onto b {:?}",
                    wt.shape(),
                    xt.shape(),
                    bt.shape()
                ),
            ));
        }
        let mut out = bt.data().to_vec();
        matvec_acc(wt.data(), xt.data(), &mut out);
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        Ok(self.push(Op::Affine { x, w, b }, Tensor::vector(out), ng))
    }

    pub fn matvec(&mut self, w: NodeId, x: NodeId) -> Result<NodeId> {
        let (wt, xt) = (self.value(w), self.value(x));
        if wt.shape().len() != 2 || wt.shape()[1] != xt.len() {
            return Err(Error::shape(
                "matvec",
                format!("W {:?} cannot map x {:?}", wt.shape(), xt.shape()),
            ));
        }
        let mut out = vec![0.0; wt.shape()[0]];
        matvec_acc(wt.data(), xt.data(), &mut out);
        let ng = self.ng(x) || self.ng(w);
        Ok(self.push(Op::MatVec { w, x }, Tensor::vector(out), ng))
    }

    fn check_same(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        if self.dim(a) != self.dim(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same("add", a, b)?;
        let out: Vec<f64> = self
            .values(a)
            .iter()
            .zip(self.values(b))
            .map(|(x, y)| x + y)
            .collect();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Op::Add(a, b), Tensor::vector(out), ng))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same("mul", a, b)?;
        let out: Vec<f64> = self
            .values(a)
            .iter()
            .zip(self.values(b))
            .map(|(x, y)| x * y)
            .collect();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Op::Mul(a, b), Tensor::vector(out), ng))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let out = self.values(a).iter().map(|v| v * c).collect();
        let ng = self.ng(a);
        self.push(Op::Scale(a, c), Tensor::vector(out), ng)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let out = self
            .values(a)
            .iter()
            .map(|&v| {
                if v >= 0.0 {
                    1.0 / (1.0 + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (1.0 + e)
                }
            })
            .collect();
        let ng = self.ng(a);
        self.push(Op::Sigmoid(a), Tensor::vector(out), ng)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let out = self.values(a).iter().map(|v| v.tanh()).collect();
        let ng = self.ng(a);
        self.push(Op::Tanh(a), Tensor::vector(out), ng)
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Empty("concat"));
        }
        let mut out = Vec::with_capacity(parts.iter().map(|&p| self.dim(p)).sum());
        for &p in parts {
            out.extend_from_slice(self.values(p));
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(Op::Concat(parts.to_vec()), Tensor::vector(out), ng))
    }

    pub fn slice(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let n = self.dim(x);
        if start + len > n {
            return Err(Error::shape(
                "slice",
                format!("[{start}, {}) out of range for length {n}", start + len),
            ));
        }
        let out = self.values(x)[start..start + len].to_vec();
        let ng = self.ng(x);
        Ok(self.push(Op::Slice { x, start }, Tensor::vector(out), ng))
    }

    /// Elementwise mean of equally sized vectors.
    pub fn mean(&mut self, items: &[NodeId]) -> Result<NodeId> {
        let first = *items.first().ok_or(Error::Empty("mean"))?;
        let d = self.dim(first);
        let mut out = vec![0.0; d];
        for &it in items {
            if self.dim(it) != d {
                return Err(Error::shape(
                    "mean",
                    format!("length {} vs {}", d, self.dim(it)),
                ));
            }
            axpy(1.0, self.values(it), &mut out);
        }
        let inv = 1.0 / items.len() as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        let ng = items.iter().any(|&p| self.ng(p));
        Ok(self.push(Op::Mean(items.to_vec()), Tensor::vector(out), ng))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.values(x).iter().sum();
        let ng = self.ng(x);
        self.push(Op::Sum(x), Tensor::scalar(s), ng)
    }

    /// Sum of scalar nodes, in order.
    pub fn sum_scalars(&mut self, items: &[NodeId]) -> Result<NodeId> {
        let mut s = 0.0;
        for &it in items {
            if self.dim(it) != 1 {
                return Err(Error::shape(
                    "sum_scalars",
                    format!("expected scalar, got {:?}", self.value(it).shape()),
                ));
            }
            s += self.scalar(it);
        }
        let ng = items.iter().any(|&p| self.ng(p));
        Ok(self.push(Op::SumScalars(items.to_vec()), Tensor::scalar(s), ng))
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same("dot", a, b)?;
        let s = dot(self.values(a), self.values(b));
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Op::Dot(a, b), Tensor::scalar(s), ng))
    }

    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let out = softmax_values(self.values(x))?;
        let ng = self.ng(x);
        Ok(self.push(Op::Softmax(x), Tensor::vector(out), ng))
    }

    pub fn log_softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.values(x);
        if v.is_empty() {
            return Err(Error::Empty("log_softmax"));
        }
        let lse = log_sum_exp(v);
        let out = v.iter().map(|z| z - lse).collect();
        let ng = self.ng(x);
        Ok(self.push(Op::LogSoftmax(x), Tensor::vector(out), ng))
    }

    /// Log-softmax restricted to the entries `idx`; output has `idx.len()` entries.
    pub fn log_softmax_subset(&mut self, x: NodeId, idx: &[usize]) -> Result<NodeId> {
        if idx.is_empty() {
            return Err(Error::Empty("log_softmax_subset"));
        }
        let v = self.values(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= v.len()) {
            return Err(Error::shape(
                "log_softmax_subset",
                format!("index {bad} out of range for length {}", v.len()),
            ));
        }
        let sel: Vec<f64> = idx.iter().map(|&i| v[i]).collect();
        let lse = log_sum_exp(&sel);
        let out = sel.iter().map(|z| z - lse).collect();
        let ng = self.ng(x);
        Ok(self.push(
            Op::LogSoftmaxSubset {
                x,
                idx: idx.to_vec(),
            },
            Tensor::vector(out),
            ng,
        ))
    }

    pub fn pick(&mut self, x: NodeId, index: usize) -> Result<NodeId> {
        let v = self.values(x);
        if index >= v.len() {
            return Err(Error::shape(
                "pick",
                format!("index {index} out of range for length {}", v.len()),
            ));
        }
        let s = v[index];
        let ng = self.ng(x);
        Ok(self.push(Op::Pick { x, index }, Tensor::scalar(s), ng))
    }

    /// `log sum_{i in idx} exp(x_i)`, a scalar.
    pub fn log_sum_exp_at(&mut self, x: NodeId, idx: &[usize]) -> Result<NodeId> {
        if idx.is_empty() {
            return Err(Error::Empty("log_sum_exp_at"));
        }
        let v = self.values(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= v.len()) {
            return Err(Error::shape(
                "log_sum_exp_at",
                format!("index {bad} out of range for length {}", v.len()),
            ));
        }
        let sel: Vec<f64> = idx.iter().map(|&i| v[i]).collect();
        let s = log_sum_exp(&sel);
        let ng = self.ng(x);
        Ok(self.push(
            Op::LogSumExpAt {
                x,
                idx: idx.to_vec(),
            },
            Tensor::scalar(s),
            ng,
        ))
    }

    /// Multiplies by a fixed mask (already scaled for inverted dropout).
    pub fn dropout(&mut self, x: NodeId, mask: Vec<f64>) -> Result<NodeId> {
        if mask.len() != self.dim(x) {
            return Err(Error::shape(
                "dropout",
                format!("mask length {} vs {}", mask.len(), self.dim(x)),
            ));
        }
        let out = self
            .values(x)
            .iter()
            .zip(&mask)
            .map(|(v, m)| v * m)
            .collect();
        let ng = self.ng(x);
        Ok(self.push(Op::Dropout { x, mask }, Tensor::vector(out), ng))
    }

    /// `sum_i weights[i] * items[i]`.
    pub fn weighted_sum(&mut self, weights: NodeId, items: &[NodeId]) -> Result<NodeId> {
        if items.is_empty() {
            return Err(Error::Empty("weighted_sum"));
        }
        if self.dim(weights) != items.len() {
            return Err(Error::shape(
                "weighted_sum",
                format!("{} weights for {} items", self.dim(weights), items.len()),
            ));
        }
        let d = self.dim(items[0]);
        let mut out = vec![0.0; d];
        for (k, &it) in items.iter().enumerate() {
            if self.dim(it) != d {
                return Err(Error::shape(
                    "weighted_sum",
                    format!("item length {} vs {}", self.dim(it), d),
                ));
            }
            let w = self.values(weights)[k];
            axpy(w, self.values(it), &mut out);
        }
        let ng = self.ng(weights) || items.iter().any(|&p| self.ng(p));
        Ok(self.push(
            Op::WeightedSum {
                weights,
                items: items.to_vec(),
            },
            Tensor::vector(out),
            ng,
        ))
    }

    /// Bahdanau scores `s_i = v . tanh(query + keys[i])` for pre-projected
    /// query and keys.
    pub fn additive_scores(&mut self, query: NodeId, keys: &[NodeId], v: NodeId) -> Result<NodeId> {
        if keys.is_empty() {
            return Err(Error::Empty("additive_scores"));
        }
        let d = self.dim(query);
        if self.dim(v) != d {
            return Err(Error::shape(
                "additive_scores",
                format!("v length {} vs query {}", self.dim(v), d),
            ));
        }
        let mut out = Vec::with_capacity(keys.len());
        let mut t = vec![0.0; d];
        for &k in keys {
            if self.dim(k) != d {
                return Err(Error::shape(
                    "additive_scores",
                    format!("key length {} vs query {}", self.dim(k), d),
                ));
            }
            for ((ti, q), kv) in t.iter_mut().zip(self.values(query)).zip(self.values(k)) {
                *ti = (q + kv).tanh();
            }
            out.push(dot(self.values(v), &t));
        }
        let ng = self.ng(query) || self.ng(v) || keys.iter().any(|&k| self.ng(k));
        Ok(self.push(
            Op::AdditiveScores {
                query,
                keys: keys.to_vec(),
                v,
            },
            Tensor::vector(out),
            ng,
        ))
    }

    /// Reverse-mode sweep from a scalar `loss` node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut pgrads = Gradients::empty(self.params.len());
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let mut sink = Sink {
                graph: self,
                grads: &mut grads,
                pgrads: &mut pgrads,
            };
            match &node.op {
                Op::Input => {}
                Op::Param(p) => {
                    axpy(1.0, &g, sink.pgrads.slot(*p, self.params).data_mut());
                }
                Op::Lookup { table, row } => {
                    let t = sink.pgrads.slot(*table, self.params);
                    let c = g.len();
                    axpy(1.0, &g, &mut t.data_mut()[row * c..(row + 1) * c]);
                }
                Op::Affine { x, w, b } => {
                    sink.with(*b, |gb| axpy(1.0, &g, gb));
                    self.matvec_backward(&mut sink, *w, *x, &g);
                }
                Op::MatVec { w, x } => self.matvec_backward(&mut sink, *w, *x, &g),
                Op::Add(a, b) => {
                    sink.with(*a, |ga| axpy(1.0, &g, ga));
                    sink.with(*b, |gb| axpy(1.0, &g, gb));
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.values(*a), self.values(*b));
                    sink.with(*a, |ga| {
                        for ((o, gi), bi) in ga.iter_mut().zip(&g).zip(bv) {
                            *o += gi * bi;
                        }
                    });
                    sink.with(*b, |gb| {
                        for ((o, gi), ai) in gb.iter_mut().zip(&g).zip(av) {
                            *o += gi * ai;
                        }
                    });
                }
                Op::Scale(a, c) => sink.with(*a, |ga| axpy(*c, &g, ga)),
                Op::Sigmoid(a) => {
                    let y = node.value.data();
                    sink.with(*a, |ga| {
                        for ((o, gi), yi) in ga.iter_mut().zip(&g).zip(y) {
                            *o += gi * yi * (1.0 - yi);
                        }
                    });
                }
                Op::Tanh(a) => {
                    let y = node.value.data();
                    sink.with(*a, |ga| {
                        for ((o, gi), yi) in ga.iter_mut().zip(&g).zip(y) {
                            *o += gi * (1.0 - yi * yi);
                        }
                    });
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let n = self.dim(p);
                        sink.with(p, |gp| axpy(1.0, &g[off..off + n], gp));
                        off += n;
                    }
                }
                Op::Slice { x, start } => {
                    let n = g.len();
                    sink.with(*x, |gx| axpy(1.0, &g, &mut gx[*start..start + n]));
                }
                Op::Mean(items) => {
                    let inv = 1.0 / items.len() as f64;
                    for &it in items {
                        sink.with(it, |gi| axpy(inv, &g, gi));
                    }
                }
                Op::Sum(x) => sink.with(*x, |gx| gx.iter_mut().for_each(|v| *v += g[0])),
                Op::SumScalars(items) => {
                    for &it in items {
                        sink.with(it, |gi| gi[0] += g[0]);
                    }
                }
                Op::Dot(a, b) => {
                    let (av, bv) = (self.values(*a), self.values(*b));
                    sink.with(*a, |ga| axpy(g[0], bv, ga));
                    sink.with(*b, |gb| axpy(g[0], av, gb));
                }
                Op::Softmax(x) => {
                    let y = node.value.data();
                    let s = dot(&g, y);
                    sink.with(*x, |gx| {
                        for ((o, gi), yi) in gx.iter_mut().zip(&g).zip(y) {
                            *o += yi * (gi - s);
                        }
                    });
                }
                Op::LogSoftmax(x) => {
                    let y = node.value.data();
                    let s: f64 = g.iter().sum();
                    sink.with(*x, |gx| {
                        for ((o, gi), yi) in gx.iter_mut().zip(&g).zip(y) {
                            *o += gi - yi.exp() * s;
                        }
                    });
                }
                Op::LogSoftmaxSubset { x, idx } => {
                    let y = node.value.data();
                    let s: f64 = g.iter().sum();
                    sink.with(*x, |gx| {
                        for (k, &i) in idx.iter().enumerate() {
                            gx[i] += g[k] - y[k].exp() * s;
                        }
                    });
                }
                Op::Pick { x, index } => sink.with(*x, |gx| gx[*index] += g[0]),
                Op::LogSumExpAt { x, idx } => {
                    let y = node.value.data()[0];
                    let xv = self.values(*x);
                    sink.with(*x, |gx| {
                        for &i in idx {
                            gx[i] += g[0] * (xv[i] - y).exp();
                        }
                    });
                }
                Op::Dropout { x, mask } => sink.with(*x, |gx| {
                    for ((o, gi), m) in gx.iter_mut().zip(&g).zip(mask) {
                        *o += gi * m;
                    }
                }),
                Op::WeightedSum { weights, items } => {
                    let wv = self.values(*weights);
                    let dw: Vec<f64> = items.iter().map(|&it| dot(&g, self.values(it))).collect();
                    sink.with(*weights, |gw| axpy(1.0, &dw, gw));
                    for (k, &it) in items.iter().enumerate() {
                        sink.with(it, |gi| axpy(wv[k], &g, gi));
                    }
                }
                Op::AdditiveScores { query, keys, v } => {
                    let qv = self.values(*query);
                    let vv = self.values(*v);
                    let d = qv.len();
                    let mut dq = vec![0.0; d];
                    let mut dv = vec![0.0; d];
                    let mut t = vec![0.0; d];
                    let mut du = vec![0.0; d];
                    for (k, &key) in keys.iter().enumerate() {
                        for ((ti, q), kv) in t.iter_mut().zip(qv).zip(self.values(key)) {
                            *ti = (q + kv).tanh();
                        }
                        axpy(g[k], &t, &mut dv);
                        for j in 0..d {
                            du[j] = g[k] * vv[j] * (1.0 - t[j] * t[j]);
                        }
                        axpy(1.0, &du, &mut dq);
                        sink.with(key, |gk| axpy(1.0, &du, gk));
                    }
                    sink.with(*query, |gq| axpy(1.0, &dq, gq));
                    sink.with(*v, |gv| axpy(1.0, &dv, gv));
                }
            }
        }
        Ok(pgrads)
    }

    fn matvec_backward(&self, sink: &mut Sink<'_, 'p>, w: NodeId, x: NodeId, g: &[f64]) {
        let wv = self.values(w);
        let xv = self.values(x);
        let cols = xv.len();
        sink.with(x, |gx| {
            for (row, gi) in wv.chunks_exact(cols).zip(g) {
                if *gi != 0.0 {
                    axpy(*gi, row, gx);
                }
            }
        });
        sink.with(w, |gw| {
            for (row, gi) in gw.chunks_exact_mut(cols).zip(g) {
                if *gi != 0.0 {
                    axpy(*gi, xv, row);
                }
            }
        });
    }
}

/// Routes gradient contributions either to a node's buffer or, for parameter
/// leaves, straight into the parameter gradient.
struct Sink<'a, 'p> {
    graph: &'a Graph<'p>,
    grads: &'a mut Vec<Option<Vec<f64>>>,
    pgrads: &'a mut Gradients,
}

impl Sink<'_, '_> {
    fn with(&mut self, id: NodeId, f: impl FnOnce(&mut [f64])) {
        let node = &self.graph.nodes[id.0];
        if !node.needs_grad {
            return;
        }
        match node.op {
            Op::Param(p) => f(self.pgrads.slot(p, self.graph.params).data_mut()),
            _ => {
                let n = node.value.len();
                f(self.grads[id.0].get_or_insert_with(|| vec![0.0; n]))
            }
        }
    }
}
