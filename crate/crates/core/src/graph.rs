//! Reverse-mode tape.
//!
//! A [`Graph`] evaluates eagerly: each method computes its forward value and
//! appends a node recording the operation and its operands. Nodes are stored
//! in creation order, which is a topological order, so [`Graph::backward`]
//! is a single reverse sweep.
//!
//! Parameters are registered by name. Registering the same name twice returns
//! the same node, so a parameter reused across iterations (or across both
//! fusion branches in shared mode) accumulates the sum of its adjoints.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::ops::{self, PoolKind};
use crate::tensor::{Scalar, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Where a matrix product sits in the model; used to attribute multiply
/// counts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MulSite {
    /// Q/K/V/O projections.
    Projection,
    /// Query-key score products.
    Scores,
    /// Score-weighted sum of values.
    Values,
    Ffn,
    Shrink,
    Nin,
    Other,
}

/// Scalar multiplications performed by matrix products, per site.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MulCounter {
    counts: BTreeMap<MulSite, u64>,
}

impl MulCounter {
    pub fn get(&self, site: MulSite) -> u64 {
        self.counts.get(&site).copied().unwrap_or(0)
    }

    /// Multiplies inside attention proper: scores plus value mixing.
    pub fn attention(&self) -> u64 {
        self.get(MulSite::Scores) + self.get(MulSite::Values)
    }

    pub fn total(&self) -> u64 {
        self.counts.values().sum()
    }

    fn add(&mut self, site: MulSite, n: usize) {
        *self.counts.entry(site).or_default() += n as u64;
    }
}

/// Gradients of a scalar objective, keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradRecord<S> {
    entries: BTreeMap<String, Tensor<S>>,
}

impl<S: Scalar> GradRecord<S> {
    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<S>> {
        self.entries.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }
}

#[derive(Debug)]
enum Op<S> {
    Input,
    Param,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    ScaleBy(Var, Var),
    OffsetMinus(Var, S),
    Sigmoid(Var),
    Relu(Var),
    Softmax(Var),
    Pool {
        x: Var,
        window: usize,
        kind: PoolKind,
        argmax: Option<Vec<usize>>,
    },
    Bilinear(Var),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Reshape(Var),
    SpaceToDepth { x: Var, window: usize },
    WeightedSum { x: Var, weights: Tensor<S> },
    MeanSquaredError { x: Var, target: Tensor<S> },
}

#[derive(Debug)]
struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    needs_grad: bool,
}

#[derive(Debug)]
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
    params: BTreeMap<String, Var>,
    param_names: BTreeMap<usize, String>,
    site: MulSite,
    muls: MulCounter,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: BTreeMap::new(),
            param_names: BTreeMap::new(),
            site: MulSite::Other,
            muls: MulCounter::default(),
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn muls(&self) -> &MulCounter {
        &self.muls
    }

    /// Runs `f` with matrix products attributed to `site`.
    pub fn at_site<R>(&mut self, site: MulSite, f: impl FnOnce(&mut Self) -> R) -> R {
        let prev = std::mem::replace(&mut self.site, site);
        let out = f(self);
        self.site = prev;
        out
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>) -> Var {
        let needs_grad = match &op {
            Op::Input => false,
            Op::Param => true,
            _ => self.operands(&op).iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn operands(&self, op: &Op<S>) -> Vec<Var> {
        match op {
            Op::Input | Op::Param => vec![],
            Op::MatMul(a, b)
            | Op::MatMulNt(a, b)
            | Op::Add(a, b)
            | Op::AddBias(a, b)
            | Op::ScaleBy(a, b) => vec![*a, *b],
            Op::OffsetMinus(x, _)
            | Op::Sigmoid(x)
            | Op::Relu(x)
            | Op::Softmax(x)
            | Op::Bilinear(x)
            | Op::Reshape(x)
            | Op::Pool { x, .. }
            | Op::SliceCols { x, .. }
            | Op::SpaceToDepth { x, .. }
            | Op::WeightedSum { x, .. }
            | Op::MeanSquaredError { x, .. } => vec![*x],
            Op::ConcatCols(xs) | Op::ConcatRows(xs) => xs.clone(),
        }
    }

    /// A constant leaf; receives no gradient.
    pub fn input(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Input)
    }

    /// A named learnable leaf. Re-registering a name returns the existing
    /// node, provided the shape agrees.
    pub fn param(&mut self, name: &str, value: &Tensor<S>) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            if self.shape(v) != value.shape() {
                return Err(Error::dim("param", self.shape(v), value.shape()));
            }
            return Ok(v);
        }
        let v = self.push(value.clone(), Op::Param);
        self.params.insert(name.to_string(), v);
        self.param_names.insert(v.0, name.to_string());
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::matmul(self.value(a), self.value(b))?;
        let (m, k) = self.value(a).dims2()?;
        let n = out.shape()[1];
        self.muls.add(self.site, m * k * n);
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::matmul_nt(self.value(a), self.value(b))?;
        let (m, k) = self.value(a).dims2()?;
        let n = out.shape()[1];
        self.muls.add(self.site, m * k * n);
        Ok(self.push(out, Op::MatMulNt(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    /// `x[R×N] + b[N]` broadcast over rows.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (_, n) = self.value(x).dims2()?;
        let bias = self.value(b);
        if bias.shape() != [n] {
            return Err(Error::dim("add_bias", self.shape(x), bias.shape()));
        }
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_exact_mut(n) {
            for (o, &bv) in row.iter_mut().zip(bias.data()) {
                *o = *o + bv;
            }
        }
        Ok(self.push(out, Op::AddBias(x, b)))
    }

    /// `k · x` where `k` is a one-element tensor.
    pub fn scale_by(&mut self, x: Var, k: Var) -> Result<Var> {
        if self.shape(k) != [1] {
            return Err(Error::dim("scale_by", self.shape(k), &[1]));
        }
        let kv = self.value(k).data()[0];
        let out = self.value(x).scale(kv);
        Ok(self.push(out, Op::ScaleBy(x, k)))
    }

    /// `offset − x`, element-wise.
    pub fn one_minus(&mut self, x: Var) -> Var {
        self.offset_minus(x, S::one())
    }

    fn offset_minus(&mut self, x: Var, offset: S) -> Var {
        let out = self.value(x).map(|v| offset - v);
        self.push(out, Op::OffsetMinus(x, offset))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(ops::sigmoid);
        self.push(out, Op::Sigmoid(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(S::zero()));
        self.push(out, Op::Relu(x))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let out = ops::softmax_rows(self.value(x))?;
        Ok(self.push(out, Op::Softmax(x)))
    }

    pub fn pool2d(&mut self, x: Var, window: usize, kind: PoolKind) -> Result<Var> {
        let (out, argmax) = ops::pool2d(self.value(x), window, kind)?;
        Ok(self.push(
            out,
            Op::Pool {
                x,
                window,
                kind,
                argmax,
            },
        ))
    }

    pub fn bilinear_resize(&mut self, x: Var, h_out: usize, w_out: usize) -> Result<Var> {
        let out = ops::bilinear_resize(self.value(x), h_out, w_out)?;
        Ok(self.push(out, Op::Bilinear(x)))
    }

    /// Columns `start..start + width` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        if width == 0 || start + width > c {
            return Err(Error::dim("slice_cols", &[r, c], &[start, width]));
        }
        let out: Vec<S> = self
            .value(x)
            .data()
            .chunks_exact(c)
            .flat_map(|row| row[start..start + width].iter().copied())
            .collect();
        let out = Tensor::new(&[r, width], out)?;
        Ok(self.push(out, Op::SliceCols { x, start }))
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::Config("concat of zero tensors".into()))?;
        let (r, _) = self.value(first).dims2()?;
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let (rx, cx) = self.value(x).dims2()?;
            if rx != r {
                return Err(Error::dim("concat_cols", self.shape(first), self.shape(x)));
            }
            widths.push(cx);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&x, &w) in xs.iter().zip(&widths) {
                out.extend_from_slice(&self.value(x).data()[i * w..(i + 1) * w]);
            }
        }
        let out = Tensor::new(&[r, total], out)?;
        Ok(self.push(out, Op::ConcatCols(xs.to_vec())))
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::Config("concat of zero tensors".into()))?;
        let (_, c) = self.value(first).dims2()?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &x in xs {
            let (rx, cx) = self.value(x).dims2()?;
            if cx != c {
                return Err(Error::dim("concat_rows", self.shape(first), self.shape(x)));
            }
            rows += rx;
            out.extend_from_slice(self.value(x).data());
        }
        let out = Tensor::new(&[rows, c], out)?;
        Ok(self.push(out, Op::ConcatRows(xs.to_vec())))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x)))
    }

    pub fn space_to_depth(&mut self, x: Var, window: usize) -> Result<Var> {
        let out = ops::space_to_depth(self.value(x), window)?;
        Ok(self.push(out, Op::SpaceToDepth { x, window }))
    }

    /// `Σ weights ⊙ x` as a one-element tensor.
    pub fn weighted_sum(&mut self, x: Var, weights: Tensor<S>) -> Result<Var> {
        let prod = self.value(x).zip_map(&weights, |a, b| a * b)?;
        let out = Tensor::scalar(prod.sum());
        Ok(self.push(out, Op::WeightedSum { x, weights }))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let ones = Tensor::full(self.shape(x), S::one());
        self.weighted_sum(x, ones)
    }

    /// Mean of `(x − target)²` as a one-element tensor.
    pub fn mse(&mut self, x: Var, target: Tensor<S>) -> Result<Var> {
        let diff = self.value(x).sub(&target)?;
        let n = S::lit(diff.numel() as f64);
        let out = Tensor::scalar(diff.data().iter().map(|&d| d * d).sum::<S>() / n);
        Ok(self.push(out, Op::MeanSquaredError { x, target }))
    }

    /// Backward from a one-element output with unit seed.
    pub fn backward_scalar(&self, out: Var) -> Result<GradRecord<S>> {
        self.backward(out, Tensor::scalar(S::one()))
    }

    /// Propagates `seed` (the gradient of some objective with respect to
    /// `out`) back to every parameter that `out` depends on.
    pub fn backward(&self, out: Var, seed: Tensor<S>) -> Result<GradRecord<S>> {
        if self.nodes.is_empty() {
            return Err(Error::State("backward called before any forward evaluation".into()));
        }
        if out.0 >= self.nodes.len() {
            return Err(Error::State(format!("unknown output node {}", out.0)));
        }
        if seed.shape() != self.shape(out) {
            return Err(Error::dim("backward seed", self.shape(out), seed.shape()));
        }
        let mut grads: Vec<Option<Tensor<S>>> = Vec::new();
        grads.resize_with(out.0 + 1, || None);
        grads[out.0] = Some(seed);
        let mut record = GradRecord::default();

        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Op::Param = node.op {
                record.entries.insert(self.param_names[&i].clone(), g);
                continue;
            }
            for (v, dv) in self.adjoint(node, &g)? {
                if !self.nodes[v.0].needs_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&dv),
                    slot => *slot = Some(dv),
                }
            }
        }
        Ok(record)
    }

    fn adjoint(&self, node: &Node<S>, g: &Tensor<S>) -> Result<Vec<(Var, Tensor<S>)>> {
        let val = |v: Var| self.value(v);
        Ok(match &node.op {
            Op::Input | Op::Param => vec![],
            Op::MatMul(a, b) => {
                let (da, db) = ops::matmul_backward(val(*a), val(*b), g)?;
                vec![(*a, da), (*b, db)]
            }
            Op::MatMulNt(a, b) => {
                let (da, db) = ops::matmul_nt_backward(val(*a), val(*b), g)?;
                vec![(*a, da), (*b, db)]
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::AddBias(x, b) => {
                let n = val(*b).numel();
                let mut db = vec![S::zero(); n];
                for row in g.data().chunks_exact(n) {
                    for (d, &gv) in db.iter_mut().zip(row) {
                        *d = *d + gv;
                    }
                }
                vec![(*x, g.clone()), (*b, Tensor::new(&[n], db)?)]
            }
            Op::ScaleBy(x, k) => {
                let kv = val(*k).data()[0];
                let dk: S = g.data().iter().zip(val(*x).data()).map(|(&a, &b)| a * b).sum();
                vec![(*x, g.scale(kv)), (*k, Tensor::scalar(dk))]
            }
            Op::OffsetMinus(x, _) => vec![(*x, g.scale(-S::one()))],
            Op::Sigmoid(x) => {
                let dx = node.value.zip_map(g, |y, gv| gv * y * (S::one() - y))?;
                vec![(*x, dx)]
            }
            Op::Relu(x) => {
                let dx = val(*x).zip_map(g, |xv, gv| if xv > S::zero() { gv } else { S::zero() })?;
                vec![(*x, dx)]
            }
            Op::Softmax(x) => vec![(*x, ops::softmax_rows_backward(&node.value, g)?)],
            Op::Pool {
                x,
                window,
                kind,
                argmax,
            } => vec![(
                *x,
                ops::pool2d_backward(val(*x).shape(), g, *window, *kind, argmax.as_deref())?,
            )],
            Op::Bilinear(x) => vec![(*x, ops::bilinear_resize_backward(val(*x).shape(), g)?)],
            Op::SliceCols { x, start } => {
                let (r, c) = val(*x).dims2()?;
                let w = g.shape()[1];
                let mut dx = Tensor::zeros(&[r, c]);
                for (drow, grow) in dx
                    .data_mut()
                    .chunks_exact_mut(c)
                    .zip(g.data().chunks_exact(w))
                {
                    drow[*start..*start + w].copy_from_slice(grow);
                }
                vec![(*x, dx)]
            }
            Op::ConcatCols(xs) => {
                let total = g.shape()[1];
                let mut offset = 0;
                let mut out = Vec::with_capacity(xs.len());
                for &x in xs {
                    let (r, w) = val(x).dims2()?;
                    let data: Vec<S> = g
                        .data()
                        .chunks_exact(total)
                        .flat_map(|row| row[offset..offset + w].iter().copied())
                        .collect();
                    out.push((x, Tensor::new(&[r, w], data)?));
                    offset += w;
                }
                out
            }
            Op::ConcatRows(xs) => {
                let mut offset = 0;
                let mut out = Vec::with_capacity(xs.len());
                for &x in xs {
                    let n = val(x).numel();
                    let part = Tensor::new(val(x).shape(), g.data()[offset..offset + n].to_vec())?;
                    out.push((x, part));
                    offset += n;
                }
                out
            }
            Op::Reshape(x) => vec![(*x, g.reshape(val(*x).shape())?)],
            Op::SpaceToDepth { x, window } => vec![(*x, ops::depth_to_space(g, *window)?)],
            Op::WeightedSum { x, weights } => vec![(*x, weights.scale(g.data()[0]))],
            Op::MeanSquaredError { x, target } => {
                let n = S::lit(target.numel() as f64);
                let k = g.data()[0] * S::lit(2.0) / n;
                vec![(*x, val(*x).zip_map(target, |a, b| (a - b) * k)?)]
            }
        })
    }
}
