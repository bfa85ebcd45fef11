//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every primitive applied during one forward pass in
//! topological order. [`Graph::backward`] walks that record in reverse and
//! accumulates gradients into every node that depends on a leaf created with
//! `requires_grad`. Graphs are single-use and single-threaded; build a fresh
//! one per utterance.

use std::sync::Arc;

use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-12;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normed: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    Ln(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    Sum(Var),
    Pick {
        x: Var,
        index: Vec<usize>,
    },
    WeightedSum(Vec<(Var, f64)>),
    ScalarLoss {
        x: Var,
        local_grad: Tensor,
    },
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    bound_params: Vec<Option<Var>>,
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
        self.push_shared(Arc::new(value), op, requires_grad)
    }

    fn push_shared(&mut self, value: Arc<Tensor>, op: Op, requires_grad: bool) -> Var {
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

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Binds a shared parameter tensor as a gradient-carrying leaf. Repeated
    /// calls with the same `slot` return the same node.
    pub fn param(&mut self, slot: usize, value: &Arc<Tensor>) -> Var {
        if slot >= self.bound_params.len() {
            self.bound_params.resize(slot + 1, None);
        }
        if let Some(v) = self.bound_params[slot] {
            return v;
        }
        let v = self.push_shared(Arc::clone(value), Op::Leaf, true);
        self.bound_params[slot] = Some(v);
        v
    }

    /// Nodes bound through [`Graph::param`], indexed by slot.
    pub fn bound_params(&self) -> &[Option<Var>] {
        &self.bound_params
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2();
        let (k2, n) = self.value(b).dims2();
        if k != k2 || self.value(a).shape().len() != 2 || self.value(b).shape().len() != 2 {
            return Err(Error::Dimension(format!(
                "matmul of {:?} by {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            false,
        );
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ` for `a: m×k`, `b: n×k`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2();
        let (n, k2) = self.value(b).dims2();
        if k != k2 || self.value(a).shape().len() != 2 || self.value(b).shape().len() != 2 {
            return Err(Error::Dimension(format!(
                "matmul_t of {:?} by transposed {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            true,
            &mut out,
            false,
        );
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulT(a, b), rg))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Dimension(format!(
                "{what} of {:?} and {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x + y);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(data, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "elementwise product")?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x * y);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(data, Op::Mul(a, b), rg))
    }

    /// Adds a length-`n` row vector to every row of an `m×n` matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (_, n) = self.value(x).dims2();
        if self.value(row).numel() != n {
            return Err(Error::Dimension(format!(
                "row broadcast of {:?} onto {:?}",
                self.value(row).shape(),
                self.value(x).shape()
            )));
        }
        let mut out = self.value(x).clone();
        let r = self.value(row).data();
        for chunk in out.data_mut().chunks_mut(n) {
            for (o, b) in chunk.iter_mut().zip(r) {
                *o += b;
            }
        }
        let rg = self.any_grad(&[x, row]);
        Ok(self.push(out, Op::AddRow(x, row), rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.value(x).map(|v| v * factor);
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Scale(x, factor), rg)
    }

    /// Softmax along the last axis, stabilized by subtracting the row maximum.
    pub fn softmax(&mut self, x: Var) -> Var {
        let out = softmax_rows(self.value(x));
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Softmax(x), rg)
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let out = log_softmax_rows(self.value(x));
        let rg = self.any_grad(&[x]);
        self.push(out, Op::LogSoftmax(x), rg)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (m, d) = self.value(x).dims2();
        if d < 2 {
            return Err(Error::Dimension(format!(
                "layer norm needs at least 2 features, got shape {:?}",
                self.value(x).shape()
            )));
        }
        if self.value(gain).numel() != d || self.value(bias).numel() != d {
            return Err(Error::Dimension(format!(
                "layer norm affine {:?}/{:?} for input {:?}",
                self.value(gain).shape(),
                self.value(bias).shape(),
                self.value(x).shape()
            )));
        }
        let xs = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut normed = vec![0.0; m * d];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * d];
        for i in 0..m {
            let row = &xs[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[i] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                normed[i * d + j] = h;
                out[i * d + j] = h * g[j] + b[j];
            }
        }
        let shape = self.value(x).shape().to_vec();
        let rg = self.any_grad(&[x, gain, bias]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                inv_std,
            },
            rg,
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(gelu);
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Gelu(x), rg)
    }

    pub fn ln(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::ln);
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Ln(x), rg)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.value(x).dims2();
        if len == 0 || start + len > n {
            return Err(Error::Dimension(format!(
                "column slice {start}..{} of {:?}",
                start + len,
                self.value(x).shape()
            )));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&src[i * n + start..i * n + start + len]);
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(vec![m, len], out)?, Op::SliceCols { x, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = parts
            .first()
            .map(|&p| self.value(p).rows())
            .ok_or_else(|| Error::Dimension("concat of zero tensors".into()))?;
        if parts.iter().any(|&p| self.value(p).rows() != m) {
            let shapes: Vec<_> = parts.iter().map(|&p| self.value(p).shape().to_vec()).collect();
            return Err(Error::Dimension(format!("column concat of {shapes:?}")));
        }
        let n: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let rg = self.any_grad(parts);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Selects `x[i, index[i]]` from each row, producing a vector.
    pub fn pick(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let (m, n) = self.value(x).dims2();
        if index.len() != m || index.iter().any(|&j| j >= n) {
            return Err(Error::Dimension(format!(
                "pick of {} indices from {:?}",
                index.len(),
                self.value(x).shape()
            )));
        }
        let out: Vec<f64> = index
            .iter()
            .enumerate()
            .map(|(i, &j)| self.value(x).get(i, j))
            .collect();
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Tensor::new(vec![m], out)?,
            Op::Pick {
                x,
                index: index.to_vec(),
            },
            rg,
        ))
    }

    /// `Σ wᵢ·sᵢ` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        if terms.iter().any(|&(v, _)| !self.value(v).is_scalar()) {
            return Err(Error::Dimension("weighted sum over non-scalar nodes".into()));
        }
        let total = terms.iter().map(|&(v, w)| w * self.value(v).item()).sum();
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        let rg = self.any_grad(&vars);
        Ok(self.push(Tensor::scalar(total), Op::WeightedSum(terms.to_vec()), rg))
    }

    /// Registers a scalar function of `x` whose value and gradient were computed
    /// outside the graph.
    pub fn scalar_loss(&mut self, x: Var, value: f64, local_grad: Tensor) -> Result<Var> {
        if local_grad.shape() != self.value(x).shape() {
            return Err(Error::Dimension(format!(
                "custom gradient {:?} for input {:?}",
                local_grad.shape(),
                self.value(x).shape()
            )));
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::scalar(value), Op::ScalarLoss { x, local_grad }, rg))
    }

    /// Back-propagates from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rv = self.value(root);
        if !rv.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                rv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::filled(rv.shape(), 1.0));
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &gy, &mut grads);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn propagate(&self, node: &Node, gy: &Tensor, grads: &mut [Option<Tensor>]) {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2();
                let n = self.value(*b).cols();
                if self.requires_grad(*a) {
                    let ga = slot(grads, *a, self.value(*a).shape());
                    gemm(
                        m,
                        n,
                        k,
                        gy.data(),
                        false,
                        self.value(*b).data(),
                        true,
                        ga.data_mut(),
                        true,
                    );
                }
                if self.requires_grad(*b) {
                    let gb = slot(grads, *b, self.value(*b).shape());
                    gemm(
                        k,
                        m,
                        n,
                        self.value(*a).data(),
                        true,
                        gy.data(),
                        false,
                        gb.data_mut(),
                        true,
                    );
                }
            }
            Op::MatMulT(a, b) => {
                // y = a·bᵀ; a: m×k, b: n×k
                let (m, k) = self.value(*a).dims2();
                let n = self.value(*b).rows();
                if self.requires_grad(*a) {
                    let ga = slot(grads, *a, self.value(*a).shape());
                    gemm(
                        m,
                        n,
                        k,
                        gy.data(),
                        false,
                        self.value(*b).data(),
                        false,
                        ga.data_mut(),
                        true,
                    );
                }
                if self.requires_grad(*b) {
                    let gb = slot(grads, *b, self.value(*b).shape());
                    gemm(
                        n,
                        m,
                        k,
                        gy.data(),
                        true,
                        self.value(*a).data(),
                        false,
                        gb.data_mut(),
                        true,
                    );
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.requires_grad(v) {
                        slot(grads, v, self.value(v).shape()).add_assign(gy);
                    }
                }
            }
            Op::AddRow(x, row) => {
                if self.requires_grad(*x) {
                    slot(grads, *x, self.value(*x).shape()).add_assign(gy);
                }
                if self.requires_grad(*row) {
                    let n = gy.cols();
                    let gr = slot(grads, *row, self.value(*row).shape());
                    for chunk in gy.data().chunks(n) {
                        for (g, v) in gr.data_mut().iter_mut().zip(chunk) {
                            *g += v;
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                for (v, other) in [(*a, *b), (*b, *a)] {
                    if self.requires_grad(v) {
                        let o = self.value(other).data();
                        let g = slot(grads, v, self.value(v).shape());
                        for ((g, d), o) in g.data_mut().iter_mut().zip(gy.data()).zip(o) {
                            *g += d * o;
                        }
                    }
                }
            }
            Op::Scale(x, f) => {
                let g = slot(grads, *x, self.value(*x).shape());
                for (g, d) in g.data_mut().iter_mut().zip(gy.data()) {
                    *g += d * f;
                }
            }
            Op::Softmax(x) => {
                let n = y.cols();
                let g = slot(grads, *x, self.value(*x).shape());
                for ((gr, yr), dr) in g
                    .data_mut()
                    .chunks_mut(n)
                    .zip(y.data().chunks(n))
                    .zip(gy.data().chunks(n))
                {
                    let dot: f64 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        gr[j] += yr[j] * (dr[j] - dot);
                    }
                }
            }
            Op::LogSoftmax(x) => {
                let n = y.cols();
                let g = slot(grads, *x, self.value(*x).shape());
                for ((gr, yr), dr) in g
                    .data_mut()
                    .chunks_mut(n)
                    .zip(y.data().chunks(n))
                    .zip(gy.data().chunks(n))
                {
                    let total: f64 = dr.iter().sum();
                    for j in 0..n {
                        gr[j] += dr[j] - yr[j].exp() * total;
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                inv_std,
            } => {
                let d = y.cols();
                let gv = self.value(*gain).data();
                if self.requires_grad(*gain) {
                    let gg = slot(grads, *gain, self.value(*gain).shape());
                    for (hr, dr) in normed.chunks(d).zip(gy.data().chunks(d)) {
                        for j in 0..d {
                            gg.data_mut()[j] += dr[j] * hr[j];
                        }
                    }
                }
                if self.requires_grad(*bias) {
                    let gb = slot(grads, *bias, self.value(*bias).shape());
                    for dr in gy.data().chunks(d) {
                        for j in 0..d {
                            gb.data_mut()[j] += dr[j];
                        }
                    }
                }
                if self.requires_grad(*x) {
                    let gx = slot(grads, *x, self.value(*x).shape());
                    let mut dh = vec![0.0; d];
                    for (i, ((gr, hr), dr)) in gx
                        .data_mut()
                        .chunks_mut(d)
                        .zip(normed.chunks(d))
                        .zip(gy.data().chunks(d))
                        .enumerate()
                    {
                        for j in 0..d {
                            dh[j] = dr[j] * gv[j];
                        }
                        let mean_dh = dh.iter().sum::<f64>() / d as f64;
                        let mean_dh_h = dh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            gr[j] += inv_std[i] * (dh[j] - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                let xs = self.value(*x).data();
                let g = slot(grads, *x, self.value(*x).shape());
                for ((g, d), &xv) in g.data_mut().iter_mut().zip(gy.data()).zip(xs) {
                    *g += d * gelu_grad(xv);
                }
            }
            Op::Ln(x) => {
                let xs = self.value(*x).data();
                let g = slot(grads, *x, self.value(*x).shape());
                for ((g, d), &xv) in g.data_mut().iter_mut().zip(gy.data()).zip(xs) {
                    *g += d / xv;
                }
            }
            Op::SliceCols { x, start } => {
                let n = self.value(*x).cols();
                let len = y.cols();
                let g = slot(grads, *x, self.value(*x).shape());
                for (i, dr) in gy.data().chunks(len).enumerate() {
                    for (g, d) in g.data_mut()[i * n + start..i * n + start + len].iter_mut().zip(dr) {
                        *g += d;
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let n = y.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.requires_grad(p) {
                        let g = slot(grads, p, self.value(p).shape());
                        for (i, gr) in g.data_mut().chunks_mut(w).enumerate() {
                            for (g, d) in gr.iter_mut().zip(&gy.data()[i * n + offset..i * n + offset + w]) {
                                *g += d;
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::Sum(x) => {
                let d = gy.item();
                let g = slot(grads, *x, self.value(*x).shape());
                for g in g.data_mut() {
                    *g += d;
                }
            }
            Op::Pick { x, index } => {
                let n = self.value(*x).cols();
                let g = slot(grads, *x, self.value(*x).shape());
                for (i, (&j, d)) in index.iter().zip(gy.data()).enumerate() {
                    g.data_mut()[i * n + j] += d;
                }
            }
            Op::WeightedSum(terms) => {
                let d = gy.item();
                for &(v, w) in terms {
                    if self.requires_grad(v) {
                        slot(grads, v, self.value(v).shape()).data_mut()[0] += d * w;
                    }
                }
            }
            Op::ScalarLoss { x, local_grad } => {
                let d = gy.item();
                let g = slot(grads, *x, self.value(*x).shape());
                for (g, l) in g.data_mut().iter_mut().zip(local_grad.data()) {
                    *g += d * l;
                }
            }
        }
    }
}

fn slot<'a>(grads: &'a mut [Option<Tensor>], v: Var, shape: &[usize]) -> &'a mut Tensor {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(shape))
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("shapes checked by caller")
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to `v`; zeros when `v` did not influence the root.
    pub fn wrt(&self, v: Var) -> Tensor {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads[v.0].take()
    }
}

pub fn softmax_rows(x: &Tensor) -> Tensor {
    let n = x.cols();
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(n) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}

pub fn log_softmax_rows(x: &Tensor) -> Tensor {
    let n = x.cols();
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(n) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::finite_diff_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Checks d(root)/d(leaf) for a graph builder against central differences.
    fn check(inputs: &[Tensor], build: impl Fn(&mut Graph, &[Var]) -> Var, tol: f64) {
        for wrt in 0..inputs.len() {
            let mut g = Graph::new();
            let vars: Vec<Var> = inputs
                .iter()
                .enumerate()
                .map(|(i, t)| g.leaf(t.clone(), i == wrt))
                .collect();
            let root = build(&mut g, &vars);
            let analytic = g.backward(root).unwrap().wrt(vars[wrt]);
            let eval = |p: &[f64]| {
                let mut g = Graph::new();
                let vars: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(i, t)| {
                        let t = if i == wrt {
                            Tensor::new(t.shape().to_vec(), p.to_vec()).unwrap()
                        } else {
                            t.clone()
                        };
                        g.leaf(t, false)
                    })
                    .collect();
                let root = build(&mut g, &vars);
                g.value(root).item()
            };
            let report = finite_diff_check(eval, analytic.data(), inputs[wrt].data(), 1e-5);
            assert!(report.max_rel_error <= tol, "input {wrt}: {report:?}");
        }
    }

    #[test]
    fn matmul_identity_and_hand_product() {
        let mut g = Graph::new();
        let b = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        let i3 = g.constant(Tensor::identity(3));
        let bv = g.constant(b.clone());
        let p = g.matmul(i3, bv).unwrap();
        assert_eq!(g.value(p), &b);

        let a = g.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let c = g.constant(Tensor::from_rows(&[vec![0.0], vec![1.0]]).unwrap());
        let p = g.matmul(a, c).unwrap();
        assert_eq!(g.value(p).data(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[4, 2]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 2]"), "{err}");
    }

    #[test]
    fn matmul_gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random(&mut rng, &[5, 7]);
        let b = random(&mut rng, &[7, 3]);
        let w = random(&mut rng, &[5, 3]);
        // root = sum(w ⊙ (a·b)) gives a non-uniform upstream gradient
        check(
            &[a, b, w],
            |g, v| {
                let p = g.matmul(v[0], v[1]).unwrap();
                let q = g.mul(p, v[2]).unwrap();
                g.sum(q)
            },
            1e-6,
        );
    }

    #[test]
    fn matmul_t_gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = random(&mut rng, &[4, 3]);
        let b = random(&mut rng, &[5, 3]);
        let w = random(&mut rng, &[4, 5]);
        check(
            &[a, b, w],
            |g, v| {
                let p = g.matmul_t(v[0], v[1]).unwrap();
                let q = g.mul(p, v[2]).unwrap();
                g.sum(q)
            },
            1e-6,
        );
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![3], vec![0.0; 3]).unwrap());
        let s = g.softmax(x);
        for &v in g.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = g.constant(Tensor::new(vec![2], vec![1000.0, 0.0]).unwrap());
        let s = g.softmax(x);
        let v = g.value(s).data();
        assert!(v.iter().all(|p| p.is_finite()));
        assert!((v[0] - 1.0).abs() < 1e-12 && v[1] < 1e-300);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = g.constant(random(&mut rng, &[4]).map(|v| v * 10.0));
        let s = g.softmax(x);
        assert!((g.value(s).sum() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn softmax_and_log_softmax_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random(&mut rng, &[3, 6]);
        let w = random(&mut rng, &[3, 6]);
        check(
            &[x.clone(), w.clone()],
            |g, v| {
                let s = g.softmax(v[0]);
                let q = g.mul(s, v[1]).unwrap();
                g.sum(q)
            },
            1e-6,
        );
        check(
            &[x, w],
            |g, v| {
                let s = g.log_softmax(v[0]);
                let q = g.mul(s, v[1]).unwrap();
                g.sum(q)
            },
            1e-6,
        );
    }

    #[test]
    fn layer_norm_examples() {
        let mut g = Graph::new();
        let gain = g.constant(Tensor::filled(&[4], 1.0));
        let bias = g.constant(Tensor::zeros(&[4]));
        let x = g.constant(Tensor::filled(&[1, 4], 2.5));
        let y = g.layer_norm(x, gain, bias).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));

        let gain = g.constant(Tensor::filled(&[2], 1.0));
        let bias = g.constant(Tensor::zeros(&[2]));
        let x = g.constant(Tensor::from_rows(&[vec![1.0, 3.0]]).unwrap());
        let y = g.layer_norm(x, gain, bias).unwrap();
        let v = g.value(y).data();
        assert!((v[0] + 1.0).abs() < 1e-10 && (v[1] - 1.0).abs() < 1e-10);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let gain = g.constant(Tensor::filled(&[8], 1.0));
        let bias = g.constant(Tensor::zeros(&[8]));
        let x = g.constant(random(&mut rng, &[3, 8]));
        let y = g.layer_norm(x, gain, bias).unwrap();
        for i in 0..3 {
            let row = g.value(y).row(i);
            let mean = row.iter().sum::<f64>() / 8.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            assert!(mean.abs() <= 1e-10);
            assert!((var - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn layer_norm_rejects_single_feature() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[3, 1]));
        let p = g.constant(Tensor::zeros(&[1]));
        assert!(matches!(g.layer_norm(x, p, p), Err(Error::Dimension(_))));
    }

    #[test]
    fn layer_norm_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = random(&mut rng, &[3, 5]);
        let gain = random(&mut rng, &[5]);
        let bias = random(&mut rng, &[5]);
        let w = random(&mut rng, &[3, 5]);
        check(
            &[x, gain, bias, w],
            |g, v| {
                let y = g.layer_norm(v[0], v[1], v[2]).unwrap();
                let q = g.mul(y, v[3]).unwrap();
                g.sum(q)
            },
            1e-6,
        );
    }

    #[test]
    fn elementwise_and_structural_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = random(&mut rng, &[3, 4]);
        let row = random(&mut rng, &[4]);
        let w = random(&mut rng, &[3, 6]);
        check(
            &[x, row, w],
            |g, v| {
                let a = g.add_row(v[0], v[1]).unwrap();
                let a = g.gelu(a);
                let l = g.slice_cols(a, 1, 2).unwrap();
                let r = g.scale(a, 0.5);
                let c = g.concat_cols(&[l, r]).unwrap();
                let q = g.mul(c, v[2]).unwrap();
                let s = g.sum(q);
                let t = g.sum(v[0]);
                g.weighted_sum(&[(s, 1.5), (t, -0.25)]).unwrap()
            },
            1e-6,
        );
    }

    #[test]
    fn backward_simple_roots() {
        let mut g = Graph::new();
        let xt = Tensor::new(vec![2, 2], vec![1.0, -2.0, 3.0, 0.5]).unwrap();
        let x = g.leaf(xt.clone(), true);
        let s = g.sum(x);
        assert_eq!(g.backward(s).unwrap().wrt(x).data(), &[1.0; 4]);

        let mut g = Graph::new();
        let x = g.leaf(xt.clone(), true);
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        let expected: Vec<f64> = xt.data().iter().map(|v| 2.0 * v).collect();
        assert_eq!(g.backward(s).unwrap().wrt(x).data(), expected.as_slice());
    }

    #[test]
    fn unused_leaf_gets_zero_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::filled(&[2], 1.0), true);
        let unused = g.leaf(Tensor::filled(&[3], 1.0), true);
        let s = g.sum(x);
        assert_eq!(g.backward(s).unwrap().wrt(unused).data(), &[0.0; 3]);
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::filled(&[2], 1.0), true);
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn linear_softmax_log_pick_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = random(&mut rng, &[4, 5]);
        let w = random(&mut rng, &[5, 3]);
        let b = random(&mut rng, &[3]);
        let labels = [0usize, 2, 1, 2];
        check(
            &[x, w, b],
            |g, v| {
                let h = g.matmul(v[0], v[1]).unwrap();
                let h = g.add_row(h, v[2]).unwrap();
                let p = g.softmax(h);
                let picked = g.pick(p, &labels).unwrap();
                let l = g.ln(picked);
                g.sum(l)
            },
            1e-6,
        );
    }

    #[test]
    fn forward_is_bit_reproducible() {
        let build = || {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let mut g = Graph::new();
            let x = g.leaf(random(&mut rng, &[6, 8]), true);
            let w = g.leaf(random(&mut rng, &[8, 8]), true);
            let h = g.matmul(x, w).unwrap();
            let h = g.gelu(h);
            let s = g.softmax(h);
            g.value(s).clone()
        };
        assert_eq!(build().data(), build().data());
    }

    #[test]
    fn param_binding_is_memoized() {
        let p = Arc::new(Tensor::filled(&[2], 3.0));
        let mut g = Graph::new();
        let a = g.param(4, &p);
        let b = g.param(4, &p);
        assert_eq!(a, b);
        assert_eq!(g.bound_params().len(), 5);
    }
}
