//! Reverse-mode autodiff over a Wengert tape.
//!
//! Operations append nodes to the tape in topological order; `backward`
//! replays them in reverse, accumulating gradients into every leaf that
//! was inserted with `requires_grad`. The operator set is closed: matmul,
//! add, sub, mul, scale, silu, softmax, rms_norm, gather (embedding),
//! concat, narrow, transpose, reshape, mean, sum, mse, cross_entropy.
//! Everything the models need is composed from these.

use crate::autodiff::tensor::Tensor;
use crate::error::{D2cError, Result};
use std::collections::HashMap;

/// Handle to a tensor on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul { a: TensorId, b: TensorId },
    Add { a: TensorId, b: TensorId },
    Sub { a: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    Scale { a: TensorId, c: f64 },
    Silu { a: TensorId },
    Softmax { a: TensorId, axis: usize },
    RmsNorm { x: TensorId, gamma: TensorId, eps: f64 },
    Gather { table: TensorId, indices: Vec<usize> },
    Concat { parts: Vec<TensorId>, axis: usize },
    Narrow { a: TensorId, axis: usize, start: usize, len: usize },
    Transpose { a: TensorId },
    Reshape { a: TensorId },
    Mean { a: TensorId },
    Sum { a: TensorId },
    Mse { a: TensorId, b: TensorId },
    CrossEntropy { logits: TensorId, targets: Vec<usize> },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients keyed by leaf id after a backward pass.
pub struct Grads {
    by_id: HashMap<usize, Tensor>,
}

impl Grads {
    /// Gradient of the loss w.r.t. the given leaf, if it was reachable
    /// and required grad. Disconnected leaves report a zero tensor via
    /// [`Grads::get_or_zeros`].
    pub fn get(&self, id: TensorId) -> Option<&Tensor> {
        self.by_id.get(&id.0)
    }

    pub fn get_or_zeros(&self, id: TensorId, shape: &[usize]) -> Tensor {
        self.by_id
            .get(&id.0)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(shape.to_vec()))
    }
}

/// The computation graph. Single-threaded; build, call `backward`, drop.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Decompose `shape` around `axis` as (outer, axis_len, inner).
fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

// ── Dense kernels ───────────────────────────────────────────────────

/// Plain dense matmul on raw row-major buffers, shared with non-tape
/// numerics (eigen routines, test oracles).
pub fn matmul_dense(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    matmul_kernel(a, b, m, k, n)
}

/// C[m,n] = A[m,k] · B[k,n]
pub(crate) fn matmul_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &aip) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
    c
}

/// C[m,k] = A[m,n] · B[k,n]ᵀ
fn matmul_nt_kernel(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        let crow = &mut c[i * k..(i + 1) * k];
        for (p, cv) in crow.iter_mut().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            *cv = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    c
}

/// C[k,n] = A[m,k]ᵀ · B[m,n]
fn matmul_tn_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; k * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &aip) in arow.iter().enumerate() {
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
    c
}

fn softmax_lanes(data: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let (outer, len, inner) = outer_inner(shape, axis);
    let mut out = vec![0.0; data.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut max = f64::NEG_INFINITY;
            for l in 0..len {
                max = max.max(data[base + l * inner]);
            }
            let mut denom = 0.0;
            for l in 0..len {
                let e = (data[base + l * inner] - max).exp();
                out[base + l * inner] = e;
                denom += e;
            }
            for l in 0..len {
                out[base + l * inner] /= denom;
            }
        }
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Insert a leaf (parameter or constant input).
    pub fn leaf(&mut self, tensor: Tensor) -> TensorId {
        let needs_grad = tensor.requires_grad();
        self.push(tensor, Op::Leaf, needs_grad)
    }

    /// Insert a non-differentiable constant.
    pub fn constant(&mut self, tensor: Tensor) -> TensorId {
        self.push(tensor, Op::Leaf, false)
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> TensorId {
        self.nodes.push(Node { value, op, needs_grad });
        TensorId(self.nodes.len() - 1)
    }

    fn needs(&self, id: TensorId) -> bool {
        self.nodes[id.0].needs_grad
    }

    // ── Operators ───────────────────────────────────────────────────

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 {
            return Err(D2cError::shape("matmul requires 2-D operands"));
        }
        let (m, k, k2, n) = (sa[0], sa[1], sb[0], sb[1]);
        if k != k2 {
            return Err(D2cError::shape(format!(
                "matmul inner dims disagree: {sa:?} x {sb:?}"
            )));
        }
        let data = matmul_kernel(self.value(a).data(), self.value(b).data(), m, k, n);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::from_raw(vec![m, n], data), Op::Matmul { a, b }, needs))
    }

    fn elementwise_pair(&self, a: TensorId, b: TensorId, name: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(D2cError::shape(format!(
                "{name} shape mismatch: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.elementwise_pair(a, b, "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::from_raw(shape, data), Op::Add { a, b }, needs))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.elementwise_pair(a, b, "sub")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::from_raw(shape, data), Op::Sub { a, b }, needs))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.elementwise_pair(a, b, "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::from_raw(shape, data), Op::Mul { a, b }, needs))
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> Result<TensorId> {
        let data = self.value(a).data().iter().map(|x| c * x).collect();
        let needs = self.needs(a);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::from_raw(shape, data), Op::Scale { a, c }, needs))
    }

    pub fn silu(&mut self, a: TensorId) -> Result<TensorId> {
        let data = self.value(a).data().iter().map(|&x| x * sigmoid(x)).collect();
        let needs = self.needs(a);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::from_raw(shape, data), Op::Silu { a }, needs))
    }

    /// Max-subtracted softmax along `axis`. Rejects non-finite input.
    pub fn softmax(&mut self, a: TensorId, axis: usize) -> Result<TensorId> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(D2cError::shape(format!(
                "softmax axis {axis} out of range for shape {shape:?}"
            )));
        }
        if !self.value(a).is_finite() {
            return Err(D2cError::numeric("softmax input contains NaN/Inf"));
        }
        let data = softmax_lanes(self.value(a).data(), &shape, axis);
        let needs = self.needs(a);
        Ok(self.push(Tensor::from_raw(shape, data), Op::Softmax { a, axis }, needs))
    }

    /// y = gamma ⊙ x / sqrt(mean(x², last axis) + eps)
    pub fn rms_norm(&mut self, x: TensorId, gamma: TensorId, eps: f64) -> Result<TensorId> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| D2cError::shape("rms_norm on rank-0"))?;
        if self.shape(gamma) != [d] {
            return Err(D2cError::shape(format!(
                "rms_norm gamma shape {:?}, expected [{d}]",
                self.shape(gamma)
            )));
        }
        if eps < 0.0 {
            return Err(D2cError::config("rms_norm eps must be >= 0"));
        }
        let g = self.value(gamma).data().to_vec();
        let xv = self.value(x).data();
        let mut data = vec![0.0; xv.len()];
        for (row_out, row_in) in data.chunks_mut(d).zip(xv.chunks(d)) {
            let ms = row_in.iter().map(|v| v * v).sum::<f64>() / d as f64;
            let r = (ms + eps).sqrt();
            if r == 0.0 {
                // zero vector with eps = 0: normalizing 0/0 is defined as 0
                continue;
            }
            for ((o, &v), gi) in row_out.iter_mut().zip(row_in).zip(&g) {
                *o = gi * v / r;
            }
        }
        let needs = self.needs(x) || self.needs(gamma);
        Ok(self.push(Tensor::from_raw(shape, data), Op::RmsNorm { x, gamma, eps }, needs))
    }

    /// Row gather: out[r] = table[indices[r]]. Used for embedding lookup
    /// and for selecting sequence rows; gradient scatter-adds into the table.
    pub fn gather(&mut self, table: TensorId, indices: &[usize]) -> Result<TensorId> {
        let ts = self.shape(table);
        if ts.len() != 2 {
            return Err(D2cError::shape("gather requires a 2-D table"));
        }
        let (v, d) = (ts[0], ts[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= v) {
            return Err(D2cError::input(format!(
                "gather index {bad} out of range for table with {v} rows"
            )));
        }
        if indices.is_empty() {
            return Err(D2cError::shape("gather with empty index list"));
        }
        let tv = self.value(table).data();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let needs = self.needs(table);
        Ok(self.push(
            Tensor::from_raw(vec![indices.len(), d], data),
            Op::Gather { table, indices: indices.to_vec() },
            needs,
        ))
    }

    pub fn concat(&mut self, parts: &[TensorId], axis: usize) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(D2cError::shape("concat of zero tensors"));
        }
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(D2cError::shape(format!(
                "concat axis {axis} out of range for shape {first:?}"
            )));
        }
        let mut axis_total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s.iter().enumerate().any(|(i, &d)| i != axis && d != first[i])
            {
                return Err(D2cError::shape(format!(
                    "concat shape mismatch: {s:?} vs {first:?} on axis {axis}"
                )));
            }
            axis_total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = axis_total;
        let (outer, _, inner) = outer_inner(&shape, axis);
        let mut data = vec![0.0; outer * axis_total * inner];
        for o in 0..outer {
            let mut written = 0;
            for &p in parts {
                let plen = self.shape(p)[axis];
                let src = self.value(p).data();
                let src_block = &src[o * plen * inner..(o + 1) * plen * inner];
                let dst_base = o * axis_total * inner + written * inner;
                data[dst_base..dst_base + plen * inner].copy_from_slice(src_block);
                written += plen;
            }
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            Tensor::from_raw(shape, data),
            Op::Concat { parts: parts.to_vec(), axis },
            needs,
        ))
    }

    /// Contiguous sub-block along `axis`; the building block for split.
    pub fn narrow(&mut self, a: TensorId, axis: usize, start: usize, len: usize) -> Result<TensorId> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(D2cError::shape(format!(
                "narrow axis {axis} out of range for shape {shape:?}"
            )));
        }
        if start + len > shape[axis] || len == 0 {
            return Err(D2cError::shape(format!(
                "narrow [{start}, {start}+{len}) out of range on axis {axis} of {shape:?}"
            )));
        }
        let (outer, alen, inner) = outer_inner(&shape, axis);
        let src = self.value(a).data();
        let mut data = vec![0.0; outer * len * inner];
        for o in 0..outer {
            let src_base = o * alen * inner + start * inner;
            let dst_base = o * len * inner;
            data[dst_base..dst_base + len * inner]
                .copy_from_slice(&src[src_base..src_base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let needs = self.needs(a);
        Ok(self.push(
            Tensor::from_raw(out_shape, data),
            Op::Narrow { a, axis, start, len },
            needs,
        ))
    }

    /// Split along `axis` into blocks of the given sizes.
    pub fn split(&mut self, a: TensorId, axis: usize, sizes: &[usize]) -> Result<Vec<TensorId>> {
        let total: usize = sizes.iter().sum();
        let axis_len = self
            .shape(a)
            .get(axis)
            .copied()
            .ok_or_else(|| D2cError::shape("split axis out of range"))?;
        if total != axis_len {
            return Err(D2cError::shape(format!(
                "split sizes sum {total} != axis length {axis_len}"
            )));
        }
        let mut out = Vec::with_capacity(sizes.len());
        let mut start = 0;
        for &len in sizes {
            out.push(self.narrow(a, axis, start, len)?);
            start += len;
        }
        Ok(out)
    }

    /// 2-D transpose by copy.
    pub fn transpose(&mut self, a: TensorId) -> Result<TensorId> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(D2cError::shape("transpose requires a 2-D tensor"));
        }
        let (m, n) = (s[0], s[1]);
        let src = self.value(a).data();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = src[i * n + j];
            }
        }
        let needs = self.needs(a);
        Ok(self.push(Tensor::from_raw(vec![n, m], data), Op::Transpose { a }, needs))
    }

    /// Contiguous reshape (same element count).
    pub fn reshape(&mut self, a: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        let numel: usize = shape.iter().product();
        if numel != self.value(a).numel() {
            return Err(D2cError::shape(format!(
                "reshape {:?} -> {:?} changes element count",
                self.shape(a),
                shape
            )));
        }
        let data = self.value(a).data().to_vec();
        let needs = self.needs(a);
        Ok(self.push(Tensor::from_raw(shape, data), Op::Reshape { a }, needs))
    }

    pub fn mean(&mut self, a: TensorId) -> Result<TensorId> {
        let n = self.value(a).numel() as f64;
        let m = self.value(a).data().iter().sum::<f64>() / n;
        let needs = self.needs(a);
        Ok(self.push(Tensor::from_raw(vec![1], vec![m]), Op::Mean { a }, needs))
    }

    pub fn sum(&mut self, a: TensorId) -> Result<TensorId> {
        let s = self.value(a).data().iter().sum::<f64>();
        let needs = self.needs(a);
        Ok(self.push(Tensor::from_raw(vec![1], vec![s]), Op::Sum { a }, needs))
    }

    /// Mean over all elements of the squared difference.
    pub fn mse(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.elementwise_pair(a, b, "mse")?;
        let n = self.value(a).numel() as f64;
        let s = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / n;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::from_raw(vec![1], vec![s]), Op::Mse { a, b }, needs))
    }

    /// SwiGLU feed-forward: (SiLU(x·w1) ⊙ (x·w3)) · w2, no bias terms.
    /// A composition, so gradients come from the constituent ops.
    pub fn swiglu(
        &mut self,
        x: TensorId,
        w1: TensorId,
        w3: TensorId,
        w2: TensorId,
    ) -> Result<TensorId> {
        let a = self.matmul(x, w1)?;
        let s = self.silu(a)?;
        let g = self.matmul(x, w3)?;
        let m = self.mul(s, g)?;
        self.matmul(m, w2)
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax
    /// of `logits` [n, K]. Log-sum-exp is max-subtracted.
    pub fn cross_entropy(&mut self, logits: TensorId, targets: &[usize]) -> Result<TensorId> {
        let s = self.shape(logits);
        if s.len() != 2 {
            return Err(D2cError::shape("cross_entropy requires 2-D logits"));
        }
        let (n, k) = (s[0], s[1]);
        if targets.len() != n {
            return Err(D2cError::shape(format!(
                "cross_entropy: {} targets for {n} logit rows",
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
            return Err(D2cError::input(format!("target {bad} out of vocab {k}")));
        }
        let lv = self.value(logits).data();
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = &lv[r * k..(r + 1) * k];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
            total += lse - row[t];
        }
        let needs = self.needs(logits);
        Ok(self.push(
            Tensor::from_raw(vec![1], vec![total / n as f64]),
            Op::CrossEntropy { logits, targets: targets.to_vec() },
            needs,
        ))
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Returns gradients for every
    /// `requires_grad` leaf reachable from the loss. Deterministic: the
    /// accumulation order is fixed by node order.
    pub fn backward(&mut self, loss: TensorId) -> Result<Grads> {
        if self.value(loss).numel() != 1 {
            return Err(D2cError::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        let mut leaf_grads = HashMap::new();

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                grads[i] = None;
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue, // not on a path to the loss
            };
            match &self.nodes[i].op {
                Op::Leaf => {
                    let shape = self.nodes[i].value.shape().to_vec();
                    leaf_grads.insert(i, Tensor::from_raw(shape, g));
                }
                op => {
                    let op = op.clone();
                    self.backprop_op(&op, i, &g, &mut grads);
                }
            }
        }
        Ok(Grads { by_id: leaf_grads })
    }

    fn accum(&self, grads: &mut [Option<Vec<f64>>], id: TensorId, delta: impl Fn(&mut [f64])) {
        if !self.needs(id) {
            return;
        }
        let slot = &mut grads[id.0];
        if slot.is_none() {
            *slot = Some(vec![0.0; self.nodes[id.0].value.numel()]);
        }
        delta(slot.as_mut().unwrap());
    }

    fn backprop_op(&self, op: &Op, node: usize, g: &[f64], grads: &mut Vec<Option<Vec<f64>>>) {
        match op {
            Op::Leaf => unreachable!(),
            Op::Matmul { a, b } => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.needs(*a) {
                    let da = matmul_nt_kernel(g, self.value(*b).data(), m, n, k);
                    self.accum(grads, *a, |buf| {
                        for (o, d) in buf.iter_mut().zip(&da) {
                            *o += d;
                        }
                    });
                }
                if self.needs(*b) {
                    let db = matmul_tn_kernel(self.value(*a).data(), g, m, k, n);
                    self.accum(grads, *b, |buf| {
                        for (o, d) in buf.iter_mut().zip(&db) {
                            *o += d;
                        }
                    });
                }
            }
            Op::Add { a, b } => {
                self.accum(grads, *a, |buf| {
                    for (o, d) in buf.iter_mut().zip(g) {
                        *o += d;
                    }
                });
                self.accum(grads, *b, |buf| {
                    for (o, d) in buf.iter_mut().zip(g) {
                        *o += d;
                    }
                });
            }
            Op::Sub { a, b } => {
                self.accum(grads, *a, |buf| {
                    for (o, d) in buf.iter_mut().zip(g) {
                        *o += d;
                    }
                });
                self.accum(grads, *b, |buf| {
                    for (o, d) in buf.iter_mut().zip(g) {
                        *o -= d;
                    }
                });
            }
            Op::Mul { a, b } => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                self.accum(grads, *a, |buf| {
                    for ((o, d), x) in buf.iter_mut().zip(g).zip(bv) {
                        *o += d * x;
                    }
                });
                self.accum(grads, *b, |buf| {
                    for ((o, d), x) in buf.iter_mut().zip(g).zip(av) {
                        *o += d * x;
                    }
                });
            }
            Op::Scale { a, c } => {
                let c = *c;
                self.accum(grads, *a, |buf| {
                    for (o, d) in buf.iter_mut().zip(g) {
                        *o += c * d;
                    }
                });
            }
            Op::Silu { a } => {
                let av = self.value(*a).data();
                self.accum(grads, *a, |buf| {
                    for ((o, d), &x) in buf.iter_mut().zip(g).zip(av) {
                        let s = sigmoid(x);
                        *o += d * s * (1.0 + x * (1.0 - s));
                    }
                });
            }
            Op::Softmax { a, axis } => {
                let y = self.value(TensorId(node)).data();
                let shape = self.shape(TensorId(node));
                let (outer, len, inner) = outer_inner(shape, *axis);
                let mut dx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let mut dot = 0.0;
                        for l in 0..len {
                            let idx = base + l * inner;
                            dot += g[idx] * y[idx];
                        }
                        for l in 0..len {
                            let idx = base + l * inner;
                            dx[idx] = y[idx] * (g[idx] - dot);
                        }
                    }
                }
                self.accum(grads, *a, |buf| {
                    for (o, d) in buf.iter_mut().zip(&dx) {
                        *o += d;
                    }
                });
            }
            Op::RmsNorm { x, gamma, eps } => {
                let xv = self.value(*x).data();
                let gv = self.value(*gamma).data();
                let d = gv.len();
                let rows = xv.len() / d;
                let mut dx = vec![0.0; xv.len()];
                let mut dgamma = vec![0.0; d];
                for r in 0..rows {
                    let xr = &xv[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let ms = xr.iter().map(|v| v * v).sum::<f64>() / d as f64;
                    let rms = (ms + eps).sqrt();
                    if rms == 0.0 {
                        continue;
                    }
                    let mut dot = 0.0;
                    for j in 0..d {
                        let up = gr[j] * gv[j];
                        dot += up * xr[j];
                        dgamma[j] += gr[j] * xr[j] / rms;
                    }
                    let scale = dot / (d as f64 * rms * rms * rms);
                    for j in 0..d {
                        dx[r * d + j] = gr[j] * gv[j] / rms - xr[j] * scale;
                    }
                }
                self.accum(grads, *x, |buf| {
                    for (o, d) in buf.iter_mut().zip(&dx) {
                        *o += d;
                    }
                });
                self.accum(grads, *gamma, |buf| {
                    for (o, d) in buf.iter_mut().zip(&dgamma) {
                        *o += d;
                    }
                });
            }
            Op::Gather { table, indices } => {
                let d = self.shape(*table)[1];
                self.accum(grads, *table, |buf| {
                    for (r, &i) in indices.iter().enumerate() {
                        let src = &g[r * d..(r + 1) * d];
                        let dst = &mut buf[i * d..(i + 1) * d];
                        for (o, s) in dst.iter_mut().zip(src) {
                            *o += s;
                        }
                    }
                });
            }
            Op::Concat { parts, axis } => {
                let out_shape = self.shape(TensorId(node));
                let (outer, total, inner) = outer_inner(out_shape, *axis);
                let mut written = 0;
                for &p in parts {
                    let plen = self.shape(p)[*axis];
                    let offset = written;
                    self.accum(grads, p, |buf| {
                        for o in 0..outer {
                            let src_base = o * total * inner + offset * inner;
                            let dst_base = o * plen * inner;
                            for j in 0..plen * inner {
                                buf[dst_base + j] += g[src_base + j];
                            }
                        }
                    });
                    written += plen;
                }
            }
            Op::Narrow { a, axis, start, len } => {
                let in_shape = self.shape(*a);
                let (outer, alen, inner) = outer_inner(in_shape, *axis);
                self.accum(grads, *a, |buf| {
                    for o in 0..outer {
                        let dst_base = o * alen * inner + start * inner;
                        let src_base = o * len * inner;
                        for j in 0..len * inner {
                            buf[dst_base + j] += g[src_base + j];
                        }
                    }
                });
            }
            Op::Transpose { a } => {
                let s = self.shape(*a);
                let (m, n) = (s[0], s[1]);
                self.accum(grads, *a, |buf| {
                    for i in 0..m {
                        for j in 0..n {
                            buf[i * n + j] += g[j * m + i];
                        }
                    }
                });
            }
            Op::Reshape { a } => {
                self.accum(grads, *a, |buf| {
                    for (o, d) in buf.iter_mut().zip(g) {
                        *o += d;
                    }
                });
            }
            Op::Mean { a } => {
                let n = self.value(*a).numel() as f64;
                let d = g[0] / n;
                self.accum(grads, *a, |buf| {
                    for o in buf.iter_mut() {
                        *o += d;
                    }
                });
            }
            Op::Sum { a } => {
                let d = g[0];
                self.accum(grads, *a, |buf| {
                    for o in buf.iter_mut() {
                        *o += d;
                    }
                });
            }
            Op::Mse { a, b } => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let n = av.len() as f64;
                let c = 2.0 * g[0] / n;
                self.accum(grads, *a, |buf| {
                    for ((o, &x), &y) in buf.iter_mut().zip(av).zip(bv) {
                        *o += c * (x - y);
                    }
                });
                self.accum(grads, *b, |buf| {
                    for ((o, &x), &y) in buf.iter_mut().zip(av).zip(bv) {
                        *o -= c * (x - y);
                    }
                });
            }
            Op::CrossEntropy { logits, targets } => {
                let lv = self.value(*logits).data();
                let n = targets.len();
                let k = self.shape(*logits)[1];
                let c = g[0] / n as f64;
                self.accum(grads, *logits, |buf| {
                    for (r, &t) in targets.iter().enumerate() {
                        let row = &lv[r * k..(r + 1) * k];
                        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let denom: f64 = row.iter().map(|&x| (x - max).exp()).sum();
                        let out = &mut buf[r * k..(r + 1) * k];
                        for (j, o) in out.iter_mut().enumerate() {
                            let p = (row[j] - max).exp() / denom;
                            *o += c * (p - if j == t { 1.0 } else { 0.0 });
                        }
                    }
                });
            }
        }
    }
}
