//! Recorded operation tape with reverse-mode differentiation.
//!
//! Every operation appends a node holding its output value and enough of its
//! inputs to compute the vector-Jacobian product later. [`Tape::backward`]
//! walks the nodes in reverse and returns a gradient per node.

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::kernels::{self, ScaleMode};
use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::ssm::scan::{self, ScanInputs};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Silu,
    Gelu,
    Tanh,
    Softplus,
    Relu,
    Exp,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Silu => kernels::silu(x),
            Activation::Gelu => kernels::gelu(x),
            Activation::Tanh => x.tanh(),
            Activation::Softplus => kernels::softplus(x),
            Activation::Relu => x.max(0.0),
            Activation::Exp => x.exp(),
        }
    }

    /// Derivative given the input `x` and output `y`.
    fn grad(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Silu => kernels::silu_grad(x),
            Activation::Gelu => kernels::gelu_grad(x),
            Activation::Tanh => 1.0 - y * y,
            Activation::Softplus => kernels::sigmoid(x),
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Exp => y,
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Linear {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    Add(NodeId, NodeId),
    /// `b` repeated over the leading axes of `a`.
    AddBroadcast(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Act(NodeId, Activation),
    Standardize {
        x: NodeId,
        mode: ScaleMode,
        scales: Vec<f64>,
        stds: Vec<f64>,
    },
    /// `x * gamma + beta` over the last axis.
    Affine {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
    },
    Concat(Vec<NodeId>),
    Slice {
        x: NodeId,
        start: usize,
    },
    Gather {
        x: NodeId,
        index: Vec<usize>,
    },
    Reshape(NodeId),
    Conv {
        x: NodeId,
        kernel: NodeId,
        bias: Option<NodeId>,
        segments: Vec<Range<usize>>,
    },
    Scan {
        x: NodeId,
        delta: NodeId,
        a: NodeId,
        b: NodeId,
        c: NodeId,
        d: NodeId,
        segments: Vec<Range<usize>>,
        fwd: scan::ScanOutput,
    },
    Dropout {
        x: NodeId,
        mask: Vec<f64>,
    },
    WeightedMse {
        pred: NodeId,
        target: Vec<f64>,
        weights: Vec<f64>,
    },
    Dot {
        x: NodeId,
        coeffs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// One forward pass worth of recorded operations.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(ParamId, NodeId)>,
    training: bool,
    rng: ChaCha8Rng,
}

impl Tape {
    /// A tape in evaluation mode: dropout is the identity.
    pub fn new() -> Self {
        Self::with_mode(false, 0)
    }

    /// A tape in training mode; `seed` drives the dropout masks.
    pub fn training(seed: u64) -> Self {
        Self::with_mode(true, seed)
    }

    fn with_mode(training: bool, seed: u64) -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
            training,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn data(&self, id: NodeId) -> &[f64] {
        self.nodes[id.0].value.data()
    }

    fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// A leaf that receives a gradient but is not a parameter.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// A leaf holding the current value of a parameter.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        let node = self.leaf(store.value(id).clone());
        self.params.push((id, node));
        node
    }

    /// `x @ w + b` over the last axis of `x`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if ws.len() != 2 || xs.is_empty() || xs[xs.len() - 1] != ws[0] {
            return Err(Error::shape(format!("linear: x {xs:?} with weight {ws:?}")));
        }
        let (k, n) = (ws[0], ws[1]);
        if let Some(b) = b {
            if self.shape(b) != [n] {
                return Err(Error::shape(format!("linear: bias {:?} for width {n}", self.shape(b))));
            }
        }
        let m = self.value(x).len() / k;
        let mut out = vec![0.0; m * n];
        if let Some(b) = b {
            let bias = self.data(b);
            for row in out.chunks_mut(n) {
                row.copy_from_slice(bias);
            }
        }
        kernels::matmul(m, k, n, self.data(x), self.data(w), &mut out, b.is_some());
        let mut shape = xs.to_vec();
        *shape.last_mut().unwrap() = n;
        Ok(self.push(Tensor::new(shape, out)?, Op::Linear { x, w, b }))
    }

    fn same_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "add")?;
        let v: Vec<f64> = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(shape, v)?, Op::Add(a, b)))
    }

    /// `a + b` where `b`'s shape is a trailing suffix of `a`'s.
    pub fn add_broadcast(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::shape(format!("add_broadcast: {sa:?} with {sb:?}")));
        }
        let bv = self.data(b);
        let n = bv.len();
        let v: Vec<f64> = self
            .data(a)
            .iter()
            .enumerate()
            .map(|(i, x)| x + bv[i % n])
            .collect();
        let shape = sa.to_vec();
        Ok(self.push(Tensor::new(shape, v)?, Op::AddBroadcast(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "mul")?;
        let v: Vec<f64> = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(shape, v)?, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let v = self.value(a).map(|x| x * factor);
        self.push(v, Op::Scale(a, factor))
    }

    pub fn act(&mut self, x: NodeId, f: Activation) -> NodeId {
        let v = self.value(x).map(|x| f.apply(x));
        self.push(v, Op::Act(x, f))
    }

    pub fn silu(&mut self, x: NodeId) -> NodeId {
        self.act(x, Activation::Silu)
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        self.act(x, Activation::Gelu)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        self.act(x, Activation::Tanh)
    }

    pub fn softplus(&mut self, x: NodeId) -> NodeId {
        self.act(x, Activation::Softplus)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.act(x, Activation::Relu)
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        self.act(x, Activation::Exp)
    }

    /// Per-position standardization over the last axis (no affine).
    pub fn standardize(&mut self, x: NodeId, eps: f64, mode: ScaleMode) -> NodeId {
        let k = self.value(x).last_dim();
        let mut out = vec![0.0; self.value(x).len()];
        let (scales, stds) = kernels::standardize_rows(self.data(x), k, eps, mode, &mut out);
        let shape = self.shape(x).to_vec();
        let value = Tensor::new(shape, out).expect("same length");
        self.push(
            value,
            Op::Standardize {
                x,
                mode,
                scales,
                stds,
            },
        )
    }

    pub fn affine(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        let k = self.value(x).last_dim();
        if self.shape(gamma) != [k] || self.shape(beta) != [k] {
            return Err(Error::shape("affine: gamma/beta must match the last axis"));
        }
        let (g, b) = (self.data(gamma), self.data(beta));
        let v: Vec<f64> = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, x)| x * g[i % k] + b[i % k])
            .collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(Tensor::new(shape, v)?, Op::Affine { x, gamma, beta }))
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        let z = self.standardize(x, eps, ScaleMode::SqrtVarEps);
        self.affine(z, gamma, beta)
    }

    /// Concatenates along the last axis; leading axes must agree.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = *parts.first().ok_or_else(|| Error::invalid("concat of nothing"))?;
        let lead = &self.shape(first)[..self.shape(first).len() - 1];
        for &p in parts {
            let s = self.shape(p);
            if s.len() != lead.len() + 1 || s[..lead.len()] != *lead {
                return Err(Error::shape(format!("concat: {s:?} vs leading {lead:?}")));
            }
        }
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).last_dim()).collect();
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.data(p)[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        Ok(self.push(Tensor::new(shape, out)?, Op::Concat(parts.to_vec())))
    }

    /// Channels `start..start+len` of the last axis.
    pub fn slice_last(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let k = self.value(x).last_dim();
        if start + len > k {
            return Err(Error::shape(format!("slice {start}+{len} of width {k}")));
        }
        let rows = self.value(x).len() / k;
        let src = self.data(x);
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&src[r * k + start..r * k + start + len]);
        }
        let mut shape = self.shape(x).to_vec();
        *shape.last_mut().unwrap() = len;
        Ok(self.push(Tensor::new(shape, out)?, Op::Slice { x, start }))
    }

    /// Selects rows of width `row_width` by index and reshapes to `shape`.
    pub fn gather_rows(&mut self, x: NodeId, row_width: usize, index: Vec<usize>, shape: &[usize]) -> Result<NodeId> {
        let n = self.value(x).len();
        if row_width == 0 || !n.is_multiple_of(row_width) {
            return Err(Error::shape("gather: row width does not divide tensor"));
        }
        let rows = n / row_width;
        if index.iter().any(|&i| i >= rows) {
            return Err(Error::shape("gather: index out of range"));
        }
        if shape.iter().product::<usize>() != index.len() * row_width {
            return Err(Error::shape("gather: output shape does not match index length"));
        }
        let src = self.data(x);
        let mut out = Vec::with_capacity(index.len() * row_width);
        for &i in &index {
            out.extend_from_slice(&src[i * row_width..(i + 1) * row_width]);
        }
        Ok(self.push(Tensor::new(shape.to_vec(), out)?, Op::Gather { x, index }))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.value(x).clone().reshape(shape)?;
        Ok(self.push(v, Op::Reshape(x)))
    }

    /// Depthwise causal convolution of `x: [S, E]` with `kernel: [E, w]`,
    /// restarting at every segment boundary.
    pub fn causal_conv(
        &mut self,
        x: NodeId,
        kernel: NodeId,
        bias: Option<NodeId>,
        segments: Vec<Range<usize>>,
    ) -> Result<NodeId> {
        let (xs, ks) = (self.shape(x), self.shape(kernel));
        if xs.len() != 2 || ks.len() != 2 || ks[0] != xs[1] || ks[1] == 0 {
            return Err(Error::shape(format!("conv: x {xs:?}, kernel {ks:?}")));
        }
        let (s, e, w) = (xs[0], xs[1], ks[1]);
        if let Some(b) = bias {
            if self.shape(b) != [e] {
                return Err(Error::shape("conv: bias must be [E]"));
            }
        }
        if segments.last().map_or(0, |r| r.end) != s {
            return Err(Error::shape("conv: segments do not cover the sequence"));
        }
        let mut out = vec![0.0; s * e];
        kernels::causal_conv(
            self.data(x),
            e,
            self.data(kernel),
            w,
            bias.map(|b| self.data(b)),
            &segments,
            &mut out,
        );
        Ok(self.push(
            Tensor::new(vec![s, e], out)?,
            Op::Conv {
                x,
                kernel,
                bias,
                segments,
            },
        ))
    }

    /// Selective scan over `x: [S, E]`; see [`crate::ssm::scan`].
    #[allow(clippy::too_many_arguments)]
    pub fn selective_scan(
        &mut self,
        x: NodeId,
        delta: NodeId,
        a: NodeId,
        b: NodeId,
        c: NodeId,
        d: NodeId,
        segments: Vec<Range<usize>>,
    ) -> Result<NodeId> {
        let out = scan::selective_scan(
            ScanInputs {
                x: self.data(x),
                delta: self.data(delta),
                a: self.data(a),
                b: self.data(b),
                c: self.data(c),
                d: self.data(d),
            },
            &segments,
        )?;
        let shape = self.shape(x).to_vec();
        let mut out = out;
        let y = Tensor::new(shape, std::mem::take(&mut out.y))?;
        Ok(self.push(
            y,
            Op::Scan {
                x,
                delta,
                a,
                b,
                c,
                d,
                segments,
                fwd: out,
            },
        ))
    }

    /// Inverted dropout; the identity outside training mode or at rate 0.
    pub fn dropout(&mut self, x: NodeId, rate: f64) -> NodeId {
        if !self.training || rate <= 0.0 {
            return x;
        }
        let keep = 1.0 - rate;
        let n = self.value(x).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if self.rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let v: Vec<f64> = self.data(x).iter().zip(&mask).map(|(a, m)| a * m).collect();
        let shape = self.shape(x).to_vec();
        self.push(Tensor::new(shape, v).expect("same length"), Op::Dropout { x, mask })
    }

    /// Mean of `weights * (target - pred)^2`; weights are constants.
    pub fn weighted_mse(&mut self, pred: NodeId, target: &[f64], weights: &[f64]) -> Result<NodeId> {
        let p = self.data(pred);
        if target.len() != p.len() || weights.len() != p.len() || p.is_empty() {
            return Err(Error::shape(format!(
                "weighted_mse: pred {}, target {}, weights {}",
                p.len(),
                target.len(),
                weights.len()
            )));
        }
        let sum: f64 = p
            .iter()
            .zip(target)
            .zip(weights)
            .map(|((p, t), w)| w * (t - p) * (t - p))
            .sum();
        let loss = sum / p.len() as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::WeightedMse {
                pred,
                target: target.to_vec(),
                weights: weights.to_vec(),
            },
        ))
    }

    /// `sum(x * coeffs)`, a scalar probe used by gradient checks.
    pub fn dot(&mut self, x: NodeId, coeffs: &[f64]) -> Result<NodeId> {
        if coeffs.len() != self.value(x).len() {
            return Err(Error::shape("dot: coefficient length"));
        }
        let v = self.data(x).iter().zip(coeffs).map(|(a, b)| a * b).sum();
        Ok(self.push(
            Tensor::scalar(v),
            Op::Dot {
                x,
                coeffs: coeffs.to_vec(),
            },
        ))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape("backward needs a scalar output"));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        grads.resize(self.nodes.len(), None);
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (k, n) = (self.shape(*w)[0], self.shape(*w)[1]);
                let m = self.value(*x).len() / k;
                {
                    let gx = acc(grads, *x, m * k);
                    kernels::matmul_bt(m, n, k, g, self.data(*w), gx);
                }
                {
                    let gw = acc(grads, *w, k * n);
                    kernels::matmul_at(m, k, n, self.data(*x), g, gw);
                }
                if let Some(b) = b {
                    let gb = acc(grads, *b, n);
                    for row in g.chunks(n) {
                        for (o, v) in gb.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                add_into(acc(grads, *a, g.len()), g);
                add_into(acc(grads, *b, g.len()), g);
            }
            Op::AddBroadcast(a, b) => {
                add_into(acc(grads, *a, g.len()), g);
                let n = self.value(*b).len();
                let gb = acc(grads, *b, n);
                for (j, v) in g.iter().enumerate() {
                    gb[j % n] += v;
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.data(*a), self.data(*b));
                {
                    let ga = acc(grads, *a, g.len());
                    for ((o, gv), y) in ga.iter_mut().zip(g).zip(bv) {
                        *o += gv * y;
                    }
                }
                let gb = acc(grads, *b, g.len());
                for ((o, gv), x) in gb.iter_mut().zip(g).zip(av) {
                    *o += gv * x;
                }
            }
            Op::Scale(a, f) => {
                let ga = acc(grads, *a, g.len());
                for (o, v) in ga.iter_mut().zip(g) {
                    *o += v * f;
                }
            }
            Op::Act(x, f) => {
                let xv = self.data(*x);
                let yv = node.value.data();
                let gx = acc(grads, *x, g.len());
                for (((o, gv), &xi), &yi) in gx.iter_mut().zip(g).zip(xv).zip(yv) {
                    *o += gv * f.grad(xi, yi);
                }
            }
            Op::Standardize {
                x,
                mode,
                scales,
                stds,
            } => {
                let k = self.value(*x).last_dim();
                let gx = acc(grads, *x, g.len());
                kernels::standardize_rows_backward(self.data(*x), k, *mode, scales, stds, g, gx);
            }
            Op::Affine { x, gamma, beta } => {
                let k = self.value(*x).last_dim();
                let xv = self.data(*x);
                let gam = self.data(*gamma);
                {
                    let gx = acc(grads, *x, g.len());
                    for (j, (o, gv)) in gx.iter_mut().zip(g).enumerate() {
                        *o += gv * gam[j % k];
                    }
                }
                {
                    let gg = acc(grads, *gamma, k);
                    for (j, (gv, xi)) in g.iter().zip(xv).enumerate() {
                        gg[j % k] += gv * xi;
                    }
                }
                let gb = acc(grads, *beta, k);
                for (j, gv) in g.iter().enumerate() {
                    gb[j % k] += gv;
                }
            }
            Op::Concat(parts) => {
                let total = node.value.last_dim();
                let rows = g.len() / total;
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).last_dim();
                    let gp = acc(grads, p, rows * w);
                    for r in 0..rows {
                        add_into(&mut gp[r * w..(r + 1) * w], &g[r * total + offset..r * total + offset + w]);
                    }
                    offset += w;
                }
            }
            Op::Slice { x, start } => {
                let k = self.value(*x).last_dim();
                let len = node.value.last_dim();
                let rows = g.len() / len.max(1);
                let gx = acc(grads, *x, rows * k);
                for r in 0..rows {
                    add_into(&mut gx[r * k + start..r * k + start + len], &g[r * len..(r + 1) * len]);
                }
            }
            Op::Gather { x, index } => {
                let n = self.value(*x).len();
                let w = g.len() / index.len().max(1);
                let gx = acc(grads, *x, n);
                for (r, &src) in index.iter().enumerate() {
                    add_into(&mut gx[src * w..(src + 1) * w], &g[r * w..(r + 1) * w]);
                }
            }
            Op::Reshape(x) => {
                add_into(acc(grads, *x, g.len()), g);
            }
            Op::Conv {
                x,
                kernel,
                bias,
                segments,
            } => {
                let (e, w) = (self.shape(*kernel)[0], self.shape(*kernel)[1]);
                let mut gx = vec![0.0; g.len()];
                let mut gk = vec![0.0; e * w];
                let mut gb = bias.map(|_| vec![0.0; e]);
                kernels::causal_conv_backward(
                    self.data(*x),
                    e,
                    self.data(*kernel),
                    w,
                    segments,
                    g,
                    &mut gx,
                    &mut gk,
                    gb.as_deref_mut(),
                );
                add_into(acc(grads, *x, gx.len()), &gx);
                add_into(acc(grads, *kernel, gk.len()), &gk);
                if let (Some(b), Some(gb)) = (bias, gb) {
                    add_into(acc(grads, *b, e), &gb);
                }
            }
            Op::Scan {
                x,
                delta,
                a,
                b,
                c,
                d,
                segments,
                fwd,
            } => {
                let sg = scan::selective_scan_backward(
                    ScanInputs {
                        x: self.data(*x),
                        delta: self.data(*delta),
                        a: self.data(*a),
                        b: self.data(*b),
                        c: self.data(*c),
                        d: self.data(*d),
                    },
                    segments,
                    fwd,
                    g,
                )?;
                add_into(acc(grads, *x, sg.x.len()), &sg.x);
                add_into(acc(grads, *delta, sg.delta.len()), &sg.delta);
                add_into(acc(grads, *a, sg.a.len()), &sg.a);
                add_into(acc(grads, *b, sg.b.len()), &sg.b);
                add_into(acc(grads, *c, sg.c.len()), &sg.c);
                add_into(acc(grads, *d, sg.d.len()), &sg.d);
            }
            Op::Dropout { x, mask } => {
                let gx = acc(grads, *x, g.len());
                for ((o, gv), m) in gx.iter_mut().zip(g).zip(mask) {
                    *o += gv * m;
                }
            }
            Op::WeightedMse {
                pred,
                target,
                weights,
            } => {
                let p = self.data(*pred);
                let n = p.len() as f64;
                let gp = acc(grads, *pred, p.len());
                for (((o, pi), t), w) in gp.iter_mut().zip(p).zip(target).zip(weights) {
                    *o += g[0] * -2.0 * w * (t - pi) / n;
                }
            }
            Op::Dot { x, coeffs } => {
                let gx = acc(grads, *x, coeffs.len());
                for (o, c) in gx.iter_mut().zip(coeffs) {
                    *o += g[0] * c;
                }
            }
        }
        Ok(())
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], id: NodeId, len: usize) -> &mut [f64] {
    grads[id.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Gradients of one backward pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, NodeId)>,
}

impl Gradients {
    /// Gradient of the loss with respect to `id`, `None` when it does not
    /// influence the loss.
    pub fn get(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    /// Gradient as a dense vector, zeros when unreached.
    pub fn get_or_zeros(&self, id: NodeId, len: usize) -> Vec<f64> {
        self.get(id).map_or_else(|| vec![0.0; len], |g| g.to_vec())
    }

    /// Adds every parameter leaf's gradient into the store.
    pub fn accumulate(&self, store: &mut ParamStore) {
        for &(pid, node) in &self.params {
            if let Some(g) = self.get(node) {
                store.accumulate_grad(pid, g);
            }
        }
    }
}
