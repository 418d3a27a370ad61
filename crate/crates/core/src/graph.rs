//! Reverse-mode tape over [`Tensor`] operations.
//!
//! A [`Graph`] records each op in execution order. [`Graph::backward`] walks
//! the tape in reverse, accumulating gradients additively when a node feeds
//! several consumers. Parameters are copied in on first use and deduplicated,
//! so a shared parameter collects the sum of its per-use gradients.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::ops::{self, NormCache, NORM_EPS};
use crate::param::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Backward rule for ops defined outside this module.
pub trait Backward {
    /// Gradient for each input, `None` where `needs[i]` is false.
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>>;
}

enum Op {
    Constant,
    Input,
    Param(ParamId),
    Fc {
        x: Var,
        w: Var,
        b: Var,
    },
    DwConv {
        x: Var,
        k: Var,
    },
    AvgPool(Var),
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Add(Var, Var),
    Mul(Var, Var),
    MulRow {
        x: Var,
        row: Var,
    },
    Relu(Var),
    Sigmoid(Var),
    Scale(Var, f64),
    Sum(Var),
    Softmax(Var),
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        cache: NormCache,
    },
    Reshape(Var),
    Column {
        x: Var,
        col: usize,
    },
    Custom {
        inputs: Vec<Var>,
        rule: Box<dyn Backward>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

/// Result of a backward pass: parameter gradients plus gradients of any
/// [`Graph::input`] leaves.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    params: Vec<(ParamId, Vec<f64>)>,
    inputs: HashMap<Var, Vec<f64>>,
}

impl Gradients {
    pub fn params(&self) -> &[(ParamId, Vec<f64>)] {
        &self.params
    }

    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .map(|(_, g)| g.as_slice())
    }

    pub fn input(&self, v: Var) -> Option<&[f64]> {
        self.inputs.get(&v).map(Vec::as_slice)
    }

    /// Adds `scale * grad` into every touched parameter's `grad`.
    pub fn accumulate_into(&self, store: &mut ParamStore, scale: f64) {
        for (id, g) in &self.params {
            store.accumulate(*id, g, scale);
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
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

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Leaf that never receives gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant, false)
    }

    /// Leaf whose gradient is reported in [`Gradients::input`].
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, true)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param(id), true);
        self.params.insert(id, v);
        v
    }

    /// Copies `v` into a new constant leaf, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    pub fn fc(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = ops::fc_forward(self.value(x), self.value(w), self.value(b))?;
        let rg = self.any_grad(&[x, w, b]);
        Ok(self.push(y, Op::Fc { x, w, b }, rg))
    }

    pub fn dwconv(&mut self, x: Var, k: Var) -> Result<Var> {
        let y = ops::depthwise_conv1d(self.value(x), self.value(k))?;
        let rg = self.any_grad(&[x, k]);
        Ok(self.push(y, Op::DwConv { x, k }, rg))
    }

    pub fn avg_pool(&mut self, x: Var) -> Result<Var> {
        let y = ops::global_avg_pool(self.value(x))?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(y, Op::AvgPool(x), rg))
    }

    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let (y, argmax) = ops::max_pool_stride2(self.value(x))?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(y, Op::MaxPool { x, argmax }, rg))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::dim(name, ta.shape(), tb.shape()));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&p, &q)| f(p, q))
            .collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.binary(a, b, "add", |p, q| p + q)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(y, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.binary(a, b, "mul", |p, q| p * q)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(y, Op::Mul(a, b), rg))
    }

    /// `x[t, d] * row[0, d]`, broadcasting a `[1, D]` row over time.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (tx, tr) = (self.value(x), self.value(row));
        if tx.shape().len() != 2 || tr.shape() != [1, tx.shape()[1]] {
            return Err(Error::dim("mul_row", tx.shape(), tr.shape()));
        }
        let d = tx.shape()[1];
        let mut data = tx.data().to_vec();
        for r in data.chunks_exact_mut(d) {
            for (v, &s) in r.iter_mut().zip(tr.data()) {
                *v *= s;
            }
        }
        let y = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.any_grad(&[x, row]);
        Ok(self.push(y, Op::MulRow { x, row }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = self.value(x).map(ops::relu);
        let rg = self.any_grad(&[x]);
        self.push(y, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = self.value(x).map(ops::sigmoid);
        let rg = self.any_grad(&[x]);
        self.push(y, Op::Sigmoid(x), rg)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let y = self.value(x).map(|v| v * c);
        let rg = self.any_grad(&[x]);
        self.push(y, Op::Scale(x, c), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let y = Tensor::scalar(self.value(x).sum());
        let rg = self.any_grad(&[x]);
        self.push(y, Op::Sum(x), rg)
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let y = ops::softmax(self.value(x))?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(y, Op::Softmax(x), rg))
    }

    pub fn group_norm(&mut self, x: Var, groups: usize, gamma: Var, beta: Var) -> Result<Var> {
        let (y, cache) = ops::group_norm(
            self.value(x),
            groups,
            self.value(gamma),
            self.value(beta),
            NORM_EPS,
        )?;
        let rg = self.any_grad(&[x, gamma, beta]);
        Ok(self.push(
            y,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                cache,
            },
            rg,
        ))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        self.group_norm(x, 1, gamma, beta)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).clone().reshape(shape)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(y, Op::Reshape(x), rg))
    }

    /// Column `col` of a `[T, D]` tensor as a `[T]` vector.
    pub fn column(&mut self, x: Var, col: usize) -> Result<Var> {
        let tx = self.value(x);
        if tx.shape().len() != 2 || col >= tx.shape()[1] {
            return Err(Error::dim("column", tx.shape(), &[col]));
        }
        let y = Tensor::vector((0..tx.rows()).map(|t| tx.get2(t, col)).collect());
        let rg = self.any_grad(&[x]);
        Ok(self.push(y, Op::Column { x, col }, rg))
    }

    /// Records an op whose forward value was computed by the caller.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, rule: Box<dyn Backward>) -> Var {
        let rg = self.any_grad(inputs);
        self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                rule,
            },
            rg,
        )
    }

    /// Reverse accumulation from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::State(format!(
                "backward from node {} but only {} nodes were recorded",
                loss.0,
                self.nodes.len()
            )));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::State(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::default();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let needs = |v: &Var| self.nodes[v.0].requires_grad;
            match &node.op {
                Op::Constant => {}
                Op::Input => {
                    out.inputs.insert(Var(i), g);
                }
                Op::Param(id) => out.params.push((*id, g)),
                Op::Fc { x, w, b } => {
                    let (dx, dw, db) =
                        ops::fc_backward(self.value(*x), self.value(*w), &g, needs(x));
                    if let Some(dx) = dx {
                        accumulate(&mut grads, *x, dx);
                    }
                    accumulate_if(&mut grads, needs(w), *w, dw);
                    accumulate_if(&mut grads, needs(b), *b, db);
                }
                Op::DwConv { x, k } => {
                    let (dx, dk) = ops::depthwise_conv1d_backward(
                        self.value(*x),
                        self.value(*k),
                        &g,
                        needs(x),
                    );
                    if let Some(dx) = dx {
                        accumulate(&mut grads, *x, dx);
                    }
                    accumulate_if(&mut grads, needs(k), *k, dk);
                }
                Op::AvgPool(x) => {
                    let tx = self.value(*x);
                    let (t, d) = (tx.rows(), tx.row_len());
                    let inv = 1.0 / t as f64;
                    let mut dx = Vec::with_capacity(t * d);
                    for _ in 0..t {
                        dx.extend(g.iter().map(|v| v * inv));
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::MaxPool { x, argmax } => {
                    let mut dx = vec![0.0; self.value(*x).len()];
                    for (&src, &gv) in argmax.iter().zip(&g) {
                        dx[src] += gv;
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Add(a, b) => {
                    if needs(a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    accumulate_if(&mut grads, needs(b), *b, g);
                }
                Op::Mul(a, b) => {
                    if needs(a) {
                        let vb = self.value(*b).data();
                        accumulate(
                            &mut grads,
                            *a,
                            g.iter().zip(vb).map(|(p, q)| p * q).collect(),
                        );
                    }
                    if needs(b) {
                        let va = self.value(*a).data();
                        accumulate(
                            &mut grads,
                            *b,
                            g.iter().zip(va).map(|(p, q)| p * q).collect(),
                        );
                    }
                }
                Op::MulRow { x, row } => {
                    let (tx, tr) = (self.value(*x), self.value(*row));
                    let d = tr.len();
                    if needs(x) {
                        let mut dx = g.clone();
                        for r in dx.chunks_exact_mut(d) {
                            for (v, &s) in r.iter_mut().zip(tr.data()) {
                                *v *= s;
                            }
                        }
                        accumulate(&mut grads, *x, dx);
                    }
                    if needs(row) {
                        let mut dr = vec![0.0; d];
                        for (gr, xr) in g.chunks_exact(d).zip(tx.data().chunks_exact(d)) {
                            for c in 0..d {
                                dr[c] += gr[c] * xr[c];
                            }
                        }
                        accumulate(&mut grads, *row, dr);
                    }
                }
                Op::Relu(x) => {
                    let vx = self.value(*x).data();
                    let dx = g
                        .iter()
                        .zip(vx)
                        .map(|(&gv, &xv)| if xv > 0.0 { gv } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, *x, dx);
                }
                Op::Sigmoid(x) => {
                    let dx = g
                        .iter()
                        .zip(node.value.data())
                        .map(|(&gv, &y)| gv * y * (1.0 - y))
                        .collect();
                    accumulate(&mut grads, *x, dx);
                }
                Op::Scale(x, c) => {
                    accumulate(&mut grads, *x, g.iter().map(|v| v * c).collect());
                }
                Op::Sum(x) => {
                    let n = self.value(*x).len();
                    accumulate(&mut grads, *x, vec![g[0]; n]);
                }
                Op::Softmax(x) => {
                    let n = *node.value.shape().last().expect("rank >= 1");
                    accumulate(
                        &mut grads,
                        *x,
                        ops::softmax_backward(node.value.data(), &g, n),
                    );
                }
                Op::GroupNorm {
                    x,
                    gamma,
                    beta,
                    groups,
                    cache,
                } => {
                    let (dx, dgamma, dbeta) = ops::group_norm_backward(
                        cache,
                        node.value.shape(),
                        *groups,
                        self.value(*gamma),
                        &g,
                        needs(x),
                    );
                    if let Some(dx) = dx {
                        accumulate(&mut grads, *x, dx);
                    }
                    accumulate_if(&mut grads, needs(gamma), *gamma, dgamma);
                    accumulate_if(&mut grads, needs(beta), *beta, dbeta);
                }
                Op::Reshape(x) => accumulate(&mut grads, *x, g),
                Op::Column { x, col } => {
                    let tx = self.value(*x);
                    let d = tx.shape()[1];
                    let mut dx = vec![0.0; tx.len()];
                    for (t, gv) in g.iter().enumerate() {
                        dx[t * d + col] = *gv;
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Custom { inputs, rule } => {
                    let vals: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
                    let need: Vec<bool> = inputs.iter().map(needs).collect();
                    let gs = rule.backward(&vals, &node.value, &g, &need);
                    for ((v, gi), n) in inputs.iter().zip(gs).zip(need) {
                        if let (Some(gi), true) = (gi, n) {
                            accumulate(&mut grads, *v, gi);
                        }
                    }
                }
            }
        }
        out.params.sort_by_key(|(id, _)| *id);
        Ok(out)
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (a, b) in existing.iter_mut().zip(&g) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn accumulate_if(grads: &mut [Option<Vec<f64>>], cond: bool, v: Var, g: Vec<f64>) {
    if cond {
        accumulate(grads, v, g);
    }
}
