//! Reverse-mode differentiation tape.
//!
//! A [`Graph`] records every operation of one forward evaluation in
//! execution order. Each node keeps its forward value and the operation that
//! produced it; [`Graph::backward`] walks the nodes in reverse, applying each
//! operation's backward rule. Parameters are borrowed from a
//! [`ParameterStore`], so binding them costs nothing, and the gradients that
//! reach them can be collected in store order with
//! [`Gradients::param_grads`].

use std::borrow::Cow;

use super::ops::{self, Pointwise};
use super::{ParamId, ParameterStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    Affine { w: Var, x: Var, b: Option<Var> },
    Add(Var, Var),
    Mul(Var, Var),
    Sigmoid(Var),
    Tanh(Var),
    Concat(Vec<Var>),
    Dot(Var, Var),
    MaskedSoftmax { scores: Var, mask: Vec<bool> },
    WeightedSum { weights: Var, rows: Vec<Var> },
    CrossEntropy { probs: Var, label: usize },
    Scale(Var, f64),
    Sum(Vec<Var>),
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
}

/// Probabilities below this are clamped before taking the log.
pub const LOG_CLAMP: f64 = 1e-12;

#[derive(Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
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

    fn push(&mut self, value: Cow<'a, Tensor>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(&mut self, value: Tensor, op: Op, context: &str) -> Result<Var> {
        value.check_finite(context)?;
        Ok(self.push(Cow::Owned(value), op))
    }

    /// A leaf that receives no parameter gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Cow::Owned(value), Op::Constant)
    }

    pub fn constant_ref(&mut self, value: &'a Tensor) -> Var {
        self.push(Cow::Borrowed(value), Op::Constant)
    }

    /// Binds a stored parameter as a leaf; gradients reaching it are
    /// reported under `id`.
    pub fn param(&mut self, store: &'a ParameterStore, id: ParamId) -> Var {
        self.push(Cow::Borrowed(store.value(id)), Op::Param(id))
    }

    pub fn affine(&mut self, w: Var, x: Var, b: Option<Var>) -> Result<Var> {
        let (wt, xt) = (self.value(w), self.value(x));
        let bt = b.map(|b| self.value(b));
        ops::check_affine(xt, wt, bt)?;
        let out = ops::affine_raw(xt, wt, bt);
        let t = Tensor::from_parts_unchecked(vec![out.len()], out);
        self.push_checked(t, Op::Affine { w, x, b }, "affine")
    }

    pub fn matvec(&mut self, w: Var, x: Var) -> Result<Var> {
        self.affine(w, x, None)
    }

    pub fn pointwise(&mut self, kind: Pointwise, operands: &[Var]) -> Result<Var> {
        if operands.len() != kind.arity() {
            return Err(Error::InvalidInput(format!(
                "{kind:?} takes {} operand(s), got {}",
                kind.arity(),
                operands.len()
            )));
        }
        let values: Vec<&Tensor> = operands.iter().map(|&v| self.value(v)).collect();
        let out = ops::pointwise_raw(kind, &values)?;
        let op = match kind {
            Pointwise::Sigmoid => Op::Sigmoid(operands[0]),
            Pointwise::Tanh => Op::Tanh(operands[0]),
            Pointwise::Multiply => Op::Mul(operands[0], operands[1]),
            Pointwise::Add => Op::Add(operands[0], operands[1]),
        };
        Ok(self.push(Cow::Owned(out), op))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.pointwise(Pointwise::Sigmoid, &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.pointwise(Pointwise::Tanh, &[a])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.pointwise(Pointwise::Multiply, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.pointwise(Pointwise::Add, &[a, b])
    }

    /// Concatenates vectors end to end.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|&v| self.value(v)).collect();
        ops::check_concat(&values)?;
        let data: Vec<f64> = values.iter().flat_map(|t| t.data().iter().copied()).collect();
        let n = data.len();
        Ok(self.push(
            Cow::Owned(Tensor::from_parts_unchecked(vec![n], data)),
            Op::Concat(parts.to_vec()),
        ))
    }

    /// Inner product of two equal-length vectors, as a length-1 vector.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (at, bt) = (self.value(a), self.value(b));
        if !at.is_vector() {
            return Err(Error::Dimension(format!("dot: operand shape {:?}", at.shape())));
        }
        ops::check_same_shape("dot", at, bt)?;
        let s: f64 = at.data().iter().zip(bt.data()).map(|(x, y)| x * y).sum();
        self.push_checked(Tensor::from_parts_unchecked(vec![1], vec![s]), Op::Dot(a, b), "dot")
    }

    pub fn masked_softmax(&mut self, scores: Var, mask: &[bool]) -> Result<Var> {
        let st = self.value(scores);
        ops::check_mask(st, mask)?;
        let out = ops::masked_softmax_raw(st.data(), mask);
        let n = out.len();
        self.push_checked(
            Tensor::from_parts_unchecked(vec![n], out),
            Op::MaskedSoftmax {
                scores,
                mask: mask.to_vec(),
            },
            "masked_softmax",
        )
    }

    pub fn softmax(&mut self, scores: Var) -> Result<Var> {
        let mask = vec![true; self.value(scores).len()];
        self.masked_softmax(scores, &mask)
    }

    /// `Σ_j weights[j] · rows[j]`.
    pub fn weighted_sum(&mut self, weights: Var, rows: &[Var]) -> Result<Var> {
        let wt = self.value(weights);
        if !wt.is_vector() || wt.len() != rows.len() {
            return Err(Error::Dimension(format!(
                "weighted_sum: {} weights for {} rows",
                wt.len(),
                rows.len()
            )));
        }
        let width = self.value(rows[0]).len();
        let mut out = vec![0.0; width];
        for (j, &r) in rows.iter().enumerate() {
            let rt = self.value(r);
            if !rt.is_vector() || rt.len() != width {
                return Err(Error::Dimension(format!(
                    "weighted_sum: row {j} has shape {:?}, expected [{width}]",
                    rt.shape()
                )));
            }
            let a = wt.get(j);
            for (o, x) in out.iter_mut().zip(rt.data()) {
                *o += a * x;
            }
        }
        self.push_checked(
            Tensor::from_parts_unchecked(vec![width], out),
            Op::WeightedSum {
                weights,
                rows: rows.to_vec(),
            },
            "weighted_sum",
        )
    }

    /// `-ln(max(probs[label], 1e-12))` as a length-1 vector.
    pub fn cross_entropy(&mut self, probs: Var, label: usize) -> Result<Var> {
        let pt = self.value(probs);
        if label >= pt.len() {
            return Err(Error::Index(format!(
                "label {label} out of range for {} classes",
                pt.len()
            )));
        }
        let loss = -pt.get(label).max(LOG_CLAMP).ln();
        self.push_checked(
            Tensor::from_parts_unchecked(vec![1], vec![loss]),
            Op::CrossEntropy { probs, label },
            "cross_entropy",
        )
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let at = self.value(a);
        let data = at.data().iter().map(|v| v * factor).collect();
        let t = Tensor::from_parts_unchecked(at.shape().to_vec(), data);
        self.push_checked(t, Op::Scale(a, factor), "scale")
    }

    /// Sum of equal-shape tensors.
    pub fn sum(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::EmptyInput("sum of zero operands".into()))?;
        let mut acc = self.value(*first).clone();
        for &p in &parts[1..] {
            let pt = self.value(p);
            ops::check_same_shape("sum", &acc, pt)?;
            for (a, x) in acc.data_mut().iter_mut().zip(pt.data()) {
                *a += x;
            }
        }
        self.push_checked(acc, Op::Sum(parts.to_vec()), "sum")
    }

    /// Back-propagates from a scalar node.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if self.value(output).len() != 1 {
            return Err(Error::Dimension(format!(
                "backward needs a scalar output, got shape {:?}",
                self.value(output).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(vec![1.0]);

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient at node {idx}")));
            }
            self.backward_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = node.value.data();
        match &node.op {
            Op::Constant | Op::Param(_) => {}
            Op::Affine { w, x, b } => {
                let wt = self.value(*w);
                let xt = self.value(*x);
                let cols = wt.cols();
                let wd = wt.data();
                {
                    let gx = slot(grads, *x, cols);
                    for (i, gi) in g.iter().enumerate() {
                        let row = &wd[i * cols..(i + 1) * cols];
                        for (acc, wij) in gx.iter_mut().zip(row) {
                            *acc += wij * gi;
                        }
                    }
                }
                {
                    let gw = slot(grads, *w, wd.len());
                    for (i, gi) in g.iter().enumerate() {
                        let row = &mut gw[i * cols..(i + 1) * cols];
                        for (acc, xj) in row.iter_mut().zip(xt.data()) {
                            *acc += gi * xj;
                        }
                    }
                }
                if let Some(b) = b {
                    add_into(slot(grads, *b, g.len()), g);
                }
            }
            Op::Add(a, b) => {
                add_into(slot(grads, *a, g.len()), g);
                add_into(slot(grads, *b, g.len()), g);
            }
            Op::Mul(a, b) => {
                let (at, bt) = (self.value(*a).data(), self.value(*b).data());
                let ga = slot(grads, *a, g.len());
                for ((acc, gi), bi) in ga.iter_mut().zip(g).zip(bt) {
                    *acc += gi * bi;
                }
                let gb = slot(grads, *b, g.len());
                for ((acc, gi), ai) in gb.iter_mut().zip(g).zip(at) {
                    *acc += gi * ai;
                }
            }
            Op::Sigmoid(a) => {
                let ga = slot(grads, *a, g.len());
                for ((acc, gi), s) in ga.iter_mut().zip(g).zip(out) {
                    *acc += gi * s * (1.0 - s);
                }
            }
            Op::Tanh(a) => {
                let ga = slot(grads, *a, g.len());
                for ((acc, gi), t) in ga.iter_mut().zip(g).zip(out) {
                    *acc += gi * (1.0 - t * t);
                }
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    add_into(slot(grads, p, n), &g[offset..offset + n]);
                    offset += n;
                }
            }
            Op::Dot(a, b) => {
                let (at, bt) = (self.value(*a).data(), self.value(*b).data());
                let ga = slot(grads, *a, at.len());
                for (acc, bi) in ga.iter_mut().zip(bt) {
                    *acc += g[0] * bi;
                }
                let gb = slot(grads, *b, bt.len());
                for (acc, ai) in gb.iter_mut().zip(at) {
                    *acc += g[0] * ai;
                }
            }
            Op::MaskedSoftmax { scores, mask } => {
                let inner: f64 = out.iter().zip(g).map(|(p, gi)| p * gi).sum();
                let gs = slot(grads, *scores, out.len());
                for (j, acc) in gs.iter_mut().enumerate() {
                    if mask[j] {
                        *acc += out[j] * (g[j] - inner);
                    }
                }
            }
            Op::WeightedSum { weights, rows } => {
                let wt = self.value(*weights).data().to_vec();
                let mut gw = vec![0.0; rows.len()];
                for (j, &r) in rows.iter().enumerate() {
                    let rt = self.value(r).data();
                    gw[j] = rt.iter().zip(g).map(|(x, gi)| x * gi).sum();
                    let gr = slot(grads, r, g.len());
                    for (acc, gi) in gr.iter_mut().zip(g) {
                        *acc += wt[j] * gi;
                    }
                }
                add_into(slot(grads, *weights, rows.len()), &gw);
            }
            Op::CrossEntropy { probs, label } => {
                let pt = self.value(*probs);
                let p = pt.get(*label);
                let gp = slot(grads, *probs, pt.len());
                if p > LOG_CLAMP {
                    gp[*label] += -g[0] / p;
                }
            }
            Op::Scale(a, factor) => {
                let ga = slot(grads, *a, g.len());
                for (acc, gi) in ga.iter_mut().zip(g) {
                    *acc += factor * gi;
                }
            }
            Op::Sum(parts) => {
                for &p in parts {
                    add_into(slot(grads, p, g.len()), g);
                }
            }
        }
    }

    /// Parameter bindings on this graph, in creation order.
    fn param_nodes(&self) -> impl Iterator<Item = (usize, ParamId)> + '_ {
        self.nodes.iter().enumerate().filter_map(|(i, n)| match n.op {
            Op::Param(id) => Some((i, id)),
            _ => None,
        })
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(acc: &mut [f64], g: &[f64]) {
    for (a, b) in acc.iter_mut().zip(g) {
        *a += b;
    }
}

/// Result of one backward pass.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient with respect to a node; `None` if nothing flowed to it.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradients summed per stored parameter, in store order. Parameters
    /// bound more than once accumulate every binding.
    pub fn param_grads(&self, graph: &Graph<'_>, store: &ParameterStore) -> Vec<Vec<f64>> {
        let mut out = store.zero_grads();
        for (node, id) in graph.param_nodes() {
            if let Some(g) = &self.grads[node] {
                add_into(&mut out[id.index()], g);
            }
        }
        out
    }
}
