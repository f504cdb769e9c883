use std::collections::HashMap;
use std::sync::Arc;

use super::value::gemm;
use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Row groups for [`Tape::segment_mean`]: output row `i` is the mean of the
/// input rows listed in `groups[i]`.
pub type Groups = Arc<Vec<Vec<usize>>>;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Sin(Var),
    Cos(Var),
    Abs(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    BceWithLogits {
        logits: Var,
        targets: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    GatherRows(Var, Arc<[usize]>),
    SegmentMean(Var, Groups),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize, usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Reverse-mode differentiation tape, rebuilt for every forward pass.
///
/// Recorded values are never mutated after creation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

/// Gradients of a scalar with respect to every leaf that requires them.
#[derive(Debug)]
pub struct Gradients {
    leaves: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.leaves.get(v.0).and_then(Option::as_ref)
    }

    /// Gradients indexed by parameter id. Parameters that did not take part
    /// in the forward pass are `None`.
    pub fn for_params(&self, store: &ParamStore) -> Vec<Option<Tensor>> {
        let mut out = vec![None; store.len()];
        for &(id, v) in &self.params {
            out[id.0] = self.get(v).cloned();
        }
        out
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn matrix_dims(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    if t.shape().len() != 2 {
        return Err(Error::invalid(op, format!("expected a matrix, got shape {:?}", t.shape())));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.push(value, op, needs_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Data that receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Free leaf that receives a gradient.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf bound to a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.leaf(store.get(id).clone());
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (r, k) = matrix_dims("matmul", ta)?;
        let (k2, s) = matrix_dims("matmul", tb)?;
        if k != k2 {
            return Err(Error::shape("matmul", ta.shape(), tb.shape()));
        }
        let mut out = vec![0.0; r * s];
        gemm(r, k, s, ta.data(), false, tb.data(), false, &mut out, 0.0);
        let value = Tensor::new(&[r, s], out)?;
        Ok(self.derived(value, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (r, k) = matrix_dims("matmul_nt", ta)?;
        let (s, k2) = matrix_dims("matmul_nt", tb)?;
        if k != k2 {
            return Err(Error::shape("matmul_nt", ta.shape(), tb.shape()));
        }
        let mut out = vec![0.0; r * s];
        gemm(r, k, s, ta.data(), false, tb.data(), true, &mut out, 0.0);
        let value = Tensor::new(&[r, s], out)?;
        Ok(self.derived(value, Op::MatMulNt(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        matrix_dims("transpose", self.value(a))?;
        let value = self.value(a).transpose();
        Ok(self.derived(value, Op::Transpose(a), &[a]))
    }

    fn zip(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(op, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip("add", a, b, |x, y| x + y)?;
        Ok(self.derived(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip("sub", a, b, |x, y| x - y)?;
        Ok(self.derived(value, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip("mul", a, b, |x, y| x * y)?;
        Ok(self.derived(value, Op::Mul(a, b), &[a, b]))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip("div", a, b, |x, y| x / y)?;
        Ok(self.derived(value, Op::Div(a, b), &[a, b]))
    }

    /// Adds a length-`k` row vector to every row of an `r x k` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(row));
        let (_, k) = matrix_dims("add_row", ta)?;
        if tb.len() != k {
            return Err(Error::shape("add_row", ta.shape(), tb.shape()));
        }
        let mut data = ta.data().to_vec();
        for chunk in data.chunks_mut(k) {
            for (x, b) in chunk.iter_mut().zip(tb.data()) {
                *x += b;
            }
        }
        let value = Tensor::new(ta.shape(), data)?;
        Ok(self.derived(value, Op::AddRow(a, row), &[a, row]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x * c);
        self.derived(value, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x + c);
        self.derived(value, Op::AddScalar(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        self.derived(value, Op::Relu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        self.derived(value, Op::Sigmoid(a), &[a])
    }

    pub fn sin(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::sin);
        self.derived(value, Op::Sin(a), &[a])
    }

    pub fn cos(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::cos);
        self.derived(value, Op::Cos(a), &[a])
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::abs);
        self.derived(value, Op::Abs(a), &[a])
    }

    /// Row-wise softmax with an optional additive mask (entries 0 or −∞).
    ///
    /// A row whose every entry is masked is rejected.
    pub fn softmax_rows(&mut self, a: Var, mask: Option<&Tensor>) -> Result<Var> {
        let ta = self.value(a);
        let (r, k) = matrix_dims("softmax_rows", ta)?;
        if let Some(m) = mask {
            same_shape("softmax_rows mask", ta, m)?;
        }
        let mut out = vec![0.0; r * k];
        for i in 0..r {
            let row = ta.row(i);
            let shifted: Vec<f64> = match mask {
                Some(m) => row.iter().zip(m.row(i)).map(|(x, b)| x + b).collect(),
                None => row.to_vec(),
            };
            let max = shifted.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::invalid("softmax_rows", format!("row {i} is fully masked")));
            }
            let o = &mut out[i * k..(i + 1) * k];
            let mut total = 0.0;
            for (dst, x) in o.iter_mut().zip(&shifted) {
                *dst = (x - max).exp();
                total += *dst;
            }
            o.iter_mut().for_each(|v| *v /= total);
        }
        let value = Tensor::new(&[r, k], out)?;
        Ok(self.derived(value, Op::SoftmaxRows(a), &[a]))
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` of length `k`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let tx = self.value(x);
        let (r, k) = matrix_dims("layer_norm", tx)?;
        let (g, b) = (self.value(gamma), self.value(beta));
        if g.len() != k || b.len() != k {
            return Err(Error::shape("layer_norm", tx.shape(), g.shape()));
        }
        let mut xhat = vec![0.0; r * k];
        let mut rstd = vec![0.0; r];
        let mut out = vec![0.0; r * k];
        for i in 0..r {
            let row = tx.row(i);
            let mean = row.iter().sum::<f64>() / k as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / k as f64;
            let s = 1.0 / (var + eps).sqrt();
            rstd[i] = s;
            for j in 0..k {
                let h = (row[j] - mean) * s;
                xhat[i * k + j] = h;
                out[i * k + j] = h * g.data()[j] + b.data()[j];
            }
        }
        let value = Tensor::new(&[r, k], out)?;
        Ok(self.derived(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let (r, k) = matrix_dims("cross_entropy", t)?;
        if targets.len() != r || r == 0 {
            return Err(Error::shape("cross_entropy", t.shape(), &[targets.len()]));
        }
        let mut probs = vec![0.0; r * k];
        let mut loss = 0.0;
        for (i, &y) in targets.iter().enumerate() {
            if y >= k {
                return Err(Error::LabelOutOfRange { label: y, classes: k });
            }
            let row = t.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for j in 0..k {
                probs[i * k + j] = (row[j] - lse).exp();
            }
            loss += lse - row[y];
        }
        let value = Tensor::scalar(loss / r as f64);
        Ok(self.derived(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Mean binary cross-entropy between `sigmoid(logits)` and `targets`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &Tensor) -> Result<Var> {
        let t = self.value(logits);
        same_shape("bce_with_logits", t, targets)?;
        if t.is_empty() {
            return Err(Error::invalid("bce_with_logits", "empty input"));
        }
        let total: f64 = t
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&x, &y)| x.max(0.0) - x * y + (-x.abs()).exp().ln_1p())
            .sum();
        let value = Tensor::scalar(total / t.len() as f64);
        Ok(self.derived(
            value,
            Op::BceWithLogits {
                logits,
                targets: targets.data().to_vec(),
            },
            &[logits],
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).data().iter().sum());
        self.derived(value, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let value = Tensor::scalar(t.data().iter().sum::<f64>() / t.len() as f64);
        self.derived(value, Op::Mean(a), &[a])
    }

    /// Sums each row of an `r x k` matrix into a length-`r` vector.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (r, _) = matrix_dims("sum_rows", t)?;
        let data = (0..r).map(|i| t.row(i).iter().sum()).collect();
        let value = Tensor::new(&[r], data)?;
        Ok(self.derived(value, Op::SumRows(a), &[a]))
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let (r, k) = matrix_dims("gather_rows", t)?;
        let mut data = Vec::with_capacity(idx.len() * k);
        for &i in idx {
            if i >= r {
                return Err(Error::invalid("gather_rows", format!("row {i} out of {r}")));
            }
            data.extend_from_slice(t.row(i));
        }
        let value = Tensor::new(&[idx.len(), k], data)?;
        Ok(self.derived(value, Op::GatherRows(a, idx.into()), &[a]))
    }

    pub fn segment_mean(&mut self, a: Var, groups: &Groups) -> Result<Var> {
        let t = self.value(a);
        let (r, k) = matrix_dims("segment_mean", t)?;
        let mut data = vec![0.0; groups.len() * k];
        for (g, members) in groups.iter().enumerate() {
            if members.is_empty() {
                return Err(Error::invalid("segment_mean", format!("group {g} is empty")));
            }
            let out = &mut data[g * k..(g + 1) * k];
            for &m in members {
                if m >= r {
                    return Err(Error::invalid("segment_mean", format!("row {m} out of {r}")));
                }
                for (o, v) in out.iter_mut().zip(t.row(m)) {
                    *o += v;
                }
            }
            let inv = 1.0 / members.len() as f64;
            out.iter_mut().for_each(|v| *v *= inv);
        }
        let value = Tensor::new(&[groups.len(), k], data)?;
        Ok(self.derived(value, Op::SegmentMean(a, groups.clone()), &[a]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let k = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            let (r, c) = matrix_dims("concat_rows", t)?;
            if c != k {
                return Err(Error::shape("concat_rows", self.shape(parts[0]), t.shape()));
            }
            rows += r;
            data.extend_from_slice(t.data());
        }
        let value = Tensor::new(&[rows, k], data)?;
        Ok(self.derived(value, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = self.value(parts[0]).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            let (pr, c) = matrix_dims("concat_cols", t)?;
            if pr != r {
                return Err(Error::shape("concat_cols", self.shape(parts[0]), t.shape()));
            }
            widths.push(c);
        }
        let k: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * k);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let value = Tensor::new(&[r, k], data)?;
        Ok(self.derived(value, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(a);
        let (r, k) = matrix_dims("slice_cols", t)?;
        if start > end || end > k {
            return Err(Error::invalid("slice_cols", format!("{start}..{end} out of {k}")));
        }
        let mut data = Vec::with_capacity(r * (end - start));
        for i in 0..r {
            data.extend_from_slice(&t.row(i)[start..end]);
        }
        let value = Tensor::new(&[r, end - start], data)?;
        Ok(self.derived(value, Op::SliceCols(a, start, end), &[a]))
    }

    /// Runs the reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 || root.value.shape().len() > 1 {
            return Err(Error::NonScalarLoss(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        let mut leaves: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        if root.needs_grad {
            grads[loss.0] = Some(vec![1.0]);
        }

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if let Op::Leaf = node.op {
                leaves[idx] = Some(Tensor::new(node.value.shape(), g)?);
                continue;
            }
            self.backprop(node, &g, &mut grads);
        }

        let mut params: Vec<(ParamId, Var)> = self.params.iter().map(|(&k, &v)| (k, v)).collect();
        params.sort_by_key(|(id, _)| *id);
        Ok(Gradients { leaves, params })
    }

    fn backprop(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let needs = |v: Var| self.nodes[v.0].needs_grad;
        // Accumulates into the gradient buffer of `v`, allocating on first use.
        fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> &'a mut Vec<f64> {
            grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()])
        }
        let nodes = &self.nodes;

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (r, k) = (val(*a).rows(), val(*a).cols());
                let s = val(*b).cols();
                if needs(*a) {
                    gemm(r, s, k, g, false, val(*b).data(), true, slot(grads, nodes, *a), 1.0);
                }
                if needs(*b) {
                    gemm(k, r, s, val(*a).data(), true, g, false, slot(grads, nodes, *b), 1.0);
                }
            }
            Op::MatMulNt(a, b) => {
                let (r, k) = (val(*a).rows(), val(*a).cols());
                let s = val(*b).rows();
                if needs(*a) {
                    gemm(r, s, k, g, false, val(*b).data(), false, slot(grads, nodes, *a), 1.0);
                }
                if needs(*b) {
                    gemm(s, r, k, g, true, val(*a).data(), false, slot(grads, nodes, *b), 1.0);
                }
            }
            Op::Transpose(a) => {
                if needs(*a) {
                    let (r, k) = (val(*a).rows(), val(*a).cols());
                    let dst = slot(grads, nodes, *a);
                    for i in 0..r {
                        for j in 0..k {
                            dst[i * k + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if needs(*a) {
                    slot(grads, nodes, *a).iter_mut().zip(g).for_each(|(d, x)| *d += x);
                }
                if needs(*b) {
                    slot(grads, nodes, *b).iter_mut().zip(g).for_each(|(d, x)| *d += sign * x);
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    let bv = val(*b).data();
                    let dst = slot(grads, nodes, *a);
                    for i in 0..g.len() {
                        dst[i] += g[i] * bv[i];
                    }
                }
                if needs(*b) {
                    let av = val(*a).data();
                    let dst = slot(grads, nodes, *b);
                    for i in 0..g.len() {
                        dst[i] += g[i] * av[i];
                    }
                }
            }
            Op::Div(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                if needs(*a) {
                    let dst = slot(grads, nodes, *a);
                    for i in 0..g.len() {
                        dst[i] += g[i] / bv[i];
                    }
                }
                if needs(*b) {
                    let dst = slot(grads, nodes, *b);
                    for i in 0..g.len() {
                        dst[i] -= g[i] * av[i] / (bv[i] * bv[i]);
                    }
                }
            }
            Op::AddRow(a, b) => {
                if needs(*a) {
                    slot(grads, nodes, *a).iter_mut().zip(g).for_each(|(d, x)| *d += x);
                }
                if needs(*b) {
                    let k = val(*b).len();
                    let dst = slot(grads, nodes, *b);
                    for chunk in g.chunks(k) {
                        for (d, x) in dst.iter_mut().zip(chunk) {
                            *d += x;
                        }
                    }
                }
            }
            Op::Scale(a, c) => {
                if needs(*a) {
                    slot(grads, nodes, *a).iter_mut().zip(g).for_each(|(d, x)| *d += c * x);
                }
            }
            Op::AddScalar(a) => {
                if needs(*a) {
                    slot(grads, nodes, *a).iter_mut().zip(g).for_each(|(d, x)| *d += x);
                }
            }
            Op::Relu(a) | Op::Abs(a) | Op::Sin(a) | Op::Cos(a) => {
                if needs(*a) {
                    let x = val(*a).data();
                    let deriv: fn(f64) -> f64 = match node.op {
                        Op::Relu(_) => |v| if v > 0.0 { 1.0 } else { 0.0 },
                        // Subgradient 0 at the kink.
                        Op::Abs(_) => |v| {
                            if v > 0.0 {
                                1.0
                            } else if v < 0.0 {
                                -1.0
                            } else {
                                0.0
                            }
                        },
                        Op::Sin(_) => f64::cos,
                        _ => |v| -v.sin(),
                    };
                    let dst = slot(grads, nodes, *a);
                    for i in 0..g.len() {
                        dst[i] += g[i] * deriv(x[i]);
                    }
                }
            }
            Op::Sigmoid(a) => {
                if needs(*a) {
                    let y = node.value.data();
                    let dst = slot(grads, nodes, *a);
                    for i in 0..g.len() {
                        dst[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                }
            }
            Op::SoftmaxRows(a) => {
                if needs(*a) {
                    let y = node.value.data();
                    let k = node.value.cols();
                    let dst = slot(grads, nodes, *a);
                    for (i, (gr, yr)) in g.chunks(k).zip(y.chunks(k)).enumerate() {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..k {
                            dst[i * k + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let k = val(*gamma).len();
                let gam = val(*gamma).data();
                if needs(*gamma) {
                    let dst = slot(grads, nodes, *gamma);
                    for (gr, hr) in g.chunks(k).zip(xhat.chunks(k)) {
                        for j in 0..k {
                            dst[j] += gr[j] * hr[j];
                        }
                    }
                }
                if needs(*beta) {
                    let dst = slot(grads, nodes, *beta);
                    for gr in g.chunks(k) {
                        for j in 0..k {
                            dst[j] += gr[j];
                        }
                    }
                }
                if needs(*x) {
                    let dst = slot(grads, nodes, *x);
                    let kf = k as f64;
                    for (i, (gr, hr)) in g.chunks(k).zip(xhat.chunks(k)).enumerate() {
                        let dh: Vec<f64> = gr.iter().zip(gam).map(|(a, b)| a * b).collect();
                        let sum_dh: f64 = dh.iter().sum();
                        let sum_dh_h: f64 = dh.iter().zip(hr).map(|(a, b)| a * b).sum();
                        for j in 0..k {
                            dst[i * k + j] += rstd[i] / kf * (kf * dh[j] - sum_dh - hr[j] * sum_dh_h);
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                if needs(*logits) {
                    let k = val(*logits).cols();
                    let scale = g[0] / targets.len() as f64;
                    let dst = slot(grads, nodes, *logits);
                    for (i, &y) in targets.iter().enumerate() {
                        for j in 0..k {
                            let onehot = if j == y { 1.0 } else { 0.0 };
                            dst[i * k + j] += scale * (probs[i * k + j] - onehot);
                        }
                    }
                }
            }
            Op::BceWithLogits { logits, targets } => {
                if needs(*logits) {
                    let x = val(*logits).data();
                    let scale = g[0] / x.len() as f64;
                    let dst = slot(grads, nodes, *logits);
                    for i in 0..x.len() {
                        dst[i] += scale * (sigmoid(x[i]) - targets[i]);
                    }
                }
            }
            Op::Sum(a) | Op::Mean(a) => {
                if needs(*a) {
                    let n = val(*a).len();
                    let s = if matches!(node.op, Op::Mean(_)) { g[0] / n as f64 } else { g[0] };
                    slot(grads, nodes, *a).iter_mut().for_each(|d| *d += s);
                }
            }
            Op::SumRows(a) => {
                if needs(*a) {
                    let k = val(*a).cols();
                    let dst = slot(grads, nodes, *a);
                    for (i, chunk) in dst.chunks_mut(k).enumerate() {
                        chunk.iter_mut().for_each(|d| *d += g[i]);
                    }
                }
            }
            Op::GatherRows(a, idx) => {
                if needs(*a) {
                    let k = val(*a).cols();
                    let dst = slot(grads, nodes, *a);
                    for (o, &i) in idx.iter().enumerate() {
                        for j in 0..k {
                            dst[i * k + j] += g[o * k + j];
                        }
                    }
                }
            }
            Op::SegmentMean(a, groups) => {
                if needs(*a) {
                    let k = val(*a).cols();
                    let dst = slot(grads, nodes, *a);
                    for (s, members) in groups.iter().enumerate() {
                        let inv = 1.0 / members.len() as f64;
                        for &m in members {
                            for j in 0..k {
                                dst[m * k + j] += g[s * k + j] * inv;
                            }
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = val(p).len();
                    if needs(p) {
                        slot(grads, nodes, p)
                            .iter_mut()
                            .zip(&g[offset..offset + n])
                            .for_each(|(d, x)| *d += x);
                    }
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut col = 0;
                for &p in parts {
                    let (r, c) = (val(p).rows(), val(p).cols());
                    if needs(p) {
                        let dst = slot(grads, nodes, p);
                        for i in 0..r {
                            for j in 0..c {
                                dst[i * c + j] += g[i * total + col + j];
                            }
                        }
                    }
                    col += c;
                }
            }
            Op::SliceCols(a, start, end) => {
                if needs(*a) {
                    let k = val(*a).cols();
                    let w = end - start;
                    let dst = slot(grads, nodes, *a);
                    for (i, chunk) in g.chunks(w).enumerate() {
                        for j in 0..w {
                            dst[i * k + start + j] += chunk[j];
                        }
                    }
                }
            }
        }
    }
}
