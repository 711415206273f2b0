use std::collections::HashMap;
use std::sync::Arc;

use super::{dim_err, gemm, gemm_strided, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Contiguous row ranges: segment `s` covers rows `offsets[s]..offsets[s + 1]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segments {
    offsets: Vec<usize>,
}

impl Segments {
    pub fn from_counts(counts: &[usize]) -> Self {
        let mut offsets = Vec::with_capacity(counts.len() + 1);
        offsets.push(0);
        for &c in counts {
            offsets.push(offsets.last().unwrap() + c);
        }
        Segments { offsets }
    }

    pub fn count(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn rows(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    pub fn range(&self, s: usize) -> std::ops::Range<usize> {
        self.offsets[s]..self.offsets[s + 1]
    }

    /// Segment index of every row.
    pub fn row_ids(&self) -> Vec<usize> {
        let mut ids = Vec::with_capacity(self.rows());
        for s in 0..self.count() {
            ids.extend(std::iter::repeat_n(s, self.range(s).len()));
        }
        ids
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Softmax { x: Var, over_rows: bool },
    SegmentSoftmax { x: Var, segs: Arc<Segments> },
    SegmentSum { x: Var, segs: Arc<Segments> },
    SegmentMax { x: Var, argmax: Vec<usize> },
    GatherRows { x: Var, idx: Arc<Vec<usize>> },
    ScatterRows { base: Var, values: Var, idx: Arc<Vec<usize>> },
    SliceCols { x: Var, start: usize },
    NormalizeRows { x: Var, inv_std: Vec<f64> },
    NormalizeCols { x: Var, inv_std: Vec<f64> },
    Reshape(Var),
    Sum(Var),
    WeightedSum { x: Var, weights: Vec<f64> },
    Focal { p: Var, target: Vec<f64>, alpha: f64, gamma: f64 },
    Bce { p: Var, target: Vec<f64> },
    SmoothL1 { x: Var, target: Vec<f64>, delta: f64 },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Probabilities fed to the log-losses are clamped to `[EPS, 1 - EPS]`.
pub const PROB_CLAMP: f64 = 1e-7;

/// A recorded forward pass.
///
/// Values are appended in evaluation order, so the reverse of insertion
/// order is a valid topological order for [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    leaf_grads: HashMap<usize, Tensor>,
    bound: HashMap<usize, Var>,
    branches: u64,
}

const FNV_PRIME: u64 = 0x0000_0100_0000_01B3;

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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.leaf_grads.get(&v.0)
    }

    pub fn zero_grads(&mut self) {
        self.leaf_grads.clear();
    }

    /// Hash of every branch taken at a non-differentiable point so far:
    /// ReLU signs, segment-max winners, smooth-L1 regions and probability
    /// clamps. Two passes with equal signatures lie on the same smooth piece.
    pub fn branch_signature(&self) -> u64 {
        self.branches
    }

    fn note_word(&mut self, w: u64) {
        self.branches = (self.branches ^ w).wrapping_mul(FNV_PRIME);
    }

    fn note_bits(&mut self, bits: impl Iterator<Item = bool>) {
        let (mut word, mut n) = (0u64, 0);
        for b in bits {
            word = (word << 1) | u64::from(b);
            n += 1;
            if n == 64 {
                self.note_word(word);
                (word, n) = (0, 0);
            }
        }
        self.note_word(word ^ ((n as u64) << 56));
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Leaf for an externally stored parameter, recorded once per key.
    pub fn bind(&mut self, key: usize, value: &Tensor) -> Var {
        if let Some(&v) = self.bound.get(&key) {
            return v;
        }
        let v = self.leaf(value.clone(), true);
        self.bound.insert(key, v);
        v
    }

    pub fn bindings(&self) -> impl Iterator<Item = (usize, Var)> + '_ {
        self.bound.iter().map(|(&k, &v)| (k, v))
    }

    fn push(&mut self, value: Tensor, op: Op, op_name: &'static str, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: op_name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn matrix(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let shape = self.shape(v);
        if shape.len() != 2 {
            return Err(dim_err(op, format!("expected a matrix, got shape {shape:?}")));
        }
        Ok((shape[0], shape[1]))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix(a, "matmul")?;
        let (k2, n) = self.matrix(b, "matmul")?;
        if k != k2 {
            return Err(dim_err("matmul", format!("inner dimensions {k} and {k2}")));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), self.value(b).data(), &mut out);
        self.push(Tensor { shape: vec![m, n], data: out }, Op::MatMul(a, b), "matmul", &[a, b])
    }

    /// `a · bᵀ` for `a: [m, k]`, `b: [n, k]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix(a, "matmul_t")?;
        let (n, k2) = self.matrix(b, "matmul_t")?;
        if k != k2 {
            return Err(dim_err("matmul_t", format!("inner dimensions {k} and {k2}")));
        }
        let mut out = vec![0.0; m * n];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        gemm_strided(m, k, n, 1.0, av, (k as isize, 1), bv, (1, k as isize), 0.0, &mut out);
        self.push(Tensor { shape: vec![m, n], data: out }, Op::MatMulT(a, b), "matmul_t", &[a, b])
    }

    fn zip(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_shape(a, b, name)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor { shape: self.shape(a).to_vec(), data })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip(a, b, "add", |x, y| x + y)?;
        self.push(t, Op::Add(a, b), "add", &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip(a, b, "sub", |x, y| x - y)?;
        self.push(t, Op::Sub(a, b), "sub", &[a, b])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip(a, b, "mul", |x, y| x * y)?;
        self.push(t, Op::Mul(a, b), "mul", &[a, b])
    }

    fn row_broadcast(&mut self, x: Var, row: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (_, c) = self.matrix(x, name)?;
        if self.value(row).len() != c {
            return Err(dim_err(name, format!("row of length {} against {c} columns", self.value(row).len())));
        }
        let r = self.value(row).data();
        let data = self.value(x).data().chunks(c.max(1)).flat_map(|xs| xs.iter().zip(r).map(|(&a, &b)| f(a, b))).collect();
        Ok(Tensor { shape: self.shape(x).to_vec(), data })
    }

    /// `x[i, :] + row` for every row `i`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let t = self.row_broadcast(x, row, "add_row", |a, b| a + b)?;
        self.push(t, Op::AddRow(x, row), "add_row", &[x, row])
    }

    /// `x[i, :] ⊙ row` for every row `i`.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let t = self.row_broadcast(x, row, "mul_row", |a, b| a * b)?;
        self.push(t, Op::MulRow(x, row), "mul_row", &[x, row])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let v = self.value(x);
        let t = Tensor { shape: v.shape().to_vec(), data: v.data().iter().map(|a| a * c).collect() };
        self.push(t, Op::Scale(x, c), "scale", &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let t = Tensor { shape: v.shape().to_vec(), data: v.data().iter().map(|a| a.max(0.0)).collect() };
        let mask: Vec<bool> = self.value(x).data().iter().map(|&a| a > 0.0).collect();
        self.note_bits(mask.into_iter());
        self.push(t, Op::Relu(x), "relu", &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let data = v.data().iter().map(|&a| sigmoid(a)).collect();
        let t = Tensor { shape: v.shape().to_vec(), data };
        self.push(t, Op::Sigmoid(x), "sigmoid", &[x])
    }

    /// Max-stabilized softmax. `axis` counts from the front: for a matrix,
    /// axis 0 normalizes each column over the rows, axis 1 each row.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || shape.len() > 2 {
            return Err(dim_err("softmax", format!("axis {axis} of shape {shape:?}")));
        }
        if shape[axis] == 0 {
            return Err(dim_err("softmax", "empty axis"));
        }
        let over_rows = shape.len() == 2 && axis == 0;
        let (r, c) = self.value(x).dims2();
        let data = if over_rows {
            segment_softmax_fwd(self.value(x).data(), c, &Segments::from_counts(&[r]))
        } else {
            let mut out = self.value(x).data().to_vec();
            for row in out.chunks_mut(c) {
                softmax_in_place(row);
            }
            out
        };
        self.push(Tensor { shape, data }, Op::Softmax { x, over_rows }, "softmax", &[x])
    }

    /// Softmax over the rows of each segment, independently per column.
    pub fn segment_softmax(&mut self, x: Var, segs: Arc<Segments>) -> Result<Var> {
        let (r, c) = self.matrix(x, "segment_softmax")?;
        if segs.rows() != r {
            return Err(dim_err("segment_softmax", format!("{} segment rows vs {r}", segs.rows())));
        }
        if (0..segs.count()).any(|s| segs.range(s).is_empty()) {
            return Err(dim_err("segment_softmax", "empty segment"));
        }
        let data = segment_softmax_fwd(self.value(x).data(), c, &segs);
        self.push(Tensor { shape: vec![r, c], data }, Op::SegmentSoftmax { x, segs }, "segment_softmax", &[x])
    }

    /// Sum of the rows of each segment: `[rows, c] -> [segments, c]`.
    pub fn segment_sum(&mut self, x: Var, segs: Arc<Segments>) -> Result<Var> {
        let (r, c) = self.matrix(x, "segment_sum")?;
        if segs.rows() != r {
            return Err(dim_err("segment_sum", format!("{} segment rows vs {r}", segs.rows())));
        }
        let xs = self.value(x).data();
        let mut out = vec![0.0; segs.count() * c];
        for s in 0..segs.count() {
            let o = &mut out[s * c..(s + 1) * c];
            for i in segs.range(s) {
                for (acc, v) in o.iter_mut().zip(&xs[i * c..(i + 1) * c]) {
                    *acc += v;
                }
            }
        }
        let n = segs.count();
        self.push(Tensor { shape: vec![n, c], data: out }, Op::SegmentSum { x, segs }, "segment_sum", &[x])
    }

    /// Channelwise max over the rows of each (non-empty) segment.
    pub fn segment_max(&mut self, x: Var, segs: &Segments) -> Result<Var> {
        let (r, c) = self.matrix(x, "segment_max")?;
        if segs.rows() != r || (0..segs.count()).any(|s| segs.range(s).is_empty()) {
            return Err(dim_err("segment_max", "segments must be non-empty and cover every row"));
        }
        let xs = self.value(x).data();
        let mut out = vec![f64::NEG_INFINITY; segs.count() * c];
        let mut argmax = vec![0; segs.count() * c];
        for s in 0..segs.count() {
            for i in segs.range(s) {
                for j in 0..c {
                    let v = xs[i * c + j];
                    if v > out[s * c + j] {
                        out[s * c + j] = v;
                        argmax[s * c + j] = i;
                    }
                }
            }
        }
        let n = segs.count();
        for &a in &argmax {
            self.note_word(a as u64);
        }
        self.push(Tensor { shape: vec![n, c], data: out }, Op::SegmentMax { x, argmax }, "segment_max", &[x])
    }

    /// Row gather: `out[i, :] = x[idx[i], :]`.
    pub fn gather_rows(&mut self, x: Var, idx: Arc<Vec<usize>>) -> Result<Var> {
        let (r, c) = self.matrix(x, "gather_rows")?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(dim_err("gather_rows", format!("row {bad} of {r}")));
        }
        let xs = self.value(x).data();
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx.iter() {
            out.extend_from_slice(&xs[i * c..(i + 1) * c]);
        }
        let n = idx.len();
        self.push(Tensor { shape: vec![n, c], data: out }, Op::GatherRows { x, idx }, "gather_rows", &[x])
    }

    /// Copy of `base` with rows `idx[i]` replaced by `values[i, :]`.
    pub fn scatter_rows(&mut self, base: Var, values: Var, idx: Arc<Vec<usize>>) -> Result<Var> {
        let (r, c) = self.matrix(base, "scatter_rows")?;
        let (n, c2) = self.matrix(values, "scatter_rows")?;
        if c != c2 || n != idx.len() || idx.iter().any(|&i| i >= r) {
            return Err(dim_err("scatter_rows", "index/values mismatch"));
        }
        let mut out = self.value(base).data().to_vec();
        let vs = self.value(values).data();
        for (k, &i) in idx.iter().enumerate() {
            out[i * c..(i + 1) * c].copy_from_slice(&vs[k * c..(k + 1) * c]);
        }
        self.push(Tensor { shape: vec![r, c], data: out }, Op::ScatterRows { base, values, idx }, "scatter_rows", &[base, values])
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.matrix(x, "slice_cols")?;
        if start > end || end > c {
            return Err(dim_err("slice_cols", format!("{start}..{end} of {c}")));
        }
        let xs = self.value(x).data();
        let mut out = Vec::with_capacity(r * (end - start));
        for i in 0..r {
            out.extend_from_slice(&xs[i * c + start..i * c + end]);
        }
        self.push(Tensor { shape: vec![r, end - start], data: out }, Op::SliceCols { x, start }, "slice_cols", &[x])
    }

    /// Zero-mean, unit-variance rows (layer-norm core).
    pub fn normalize_rows(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (r, c) = self.matrix(x, "normalize_rows")?;
        let xs = self.value(x).data();
        let mut out = vec![0.0; r * c];
        let mut inv_std = Vec::with_capacity(r);
        for i in 0..r {
            let row = &xs[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for (o, v) in out[i * c..(i + 1) * c].iter_mut().zip(row) {
                *o = (v - mean) * inv;
            }
            inv_std.push(inv);
        }
        self.push(Tensor { shape: vec![r, c], data: out }, Op::NormalizeRows { x, inv_std }, "normalize_rows", &[x])
    }

    /// Zero-mean, unit-variance columns (batch-norm core). Returns the
    /// per-column batch mean and biased variance alongside.
    pub fn normalize_cols(&mut self, x: Var, eps: f64) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let (r, c) = self.matrix(x, "normalize_cols")?;
        if r == 0 {
            return Err(dim_err("normalize_cols", "no rows"));
        }
        let xs = self.value(x).data();
        let mut mean = vec![0.0; c];
        for row in xs.chunks(c) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= r as f64);
        let mut var = vec![0.0; c];
        for row in xs.chunks(c) {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m).powi(2);
            }
        }
        var.iter_mut().for_each(|s| *s /= r as f64);
        let inv_std: Vec<f64> = var.iter().map(|s| 1.0 / (s + eps).sqrt()).collect();
        let mut out = vec![0.0; r * c];
        for (orow, row) in out.chunks_mut(c).zip(xs.chunks(c)) {
            for j in 0..c {
                orow[j] = (row[j] - mean[j]) * inv_std[j];
            }
        }
        let v = self.push(Tensor { shape: vec![r, c], data: out }, Op::NormalizeCols { x, inv_std }, "normalize_cols", &[x])?;
        Ok((v, mean, var))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        self.push(t, Op::Reshape(x), "reshape", &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), "sum", &[x])
    }

    /// `Σ_i weights[i] · x[i]` with constant weights.
    pub fn weighted_sum(&mut self, x: Var, weights: Vec<f64>) -> Result<Var> {
        if weights.len() != self.value(x).len() {
            return Err(dim_err("weighted_sum", "weights length"));
        }
        let s = self.value(x).data().iter().zip(&weights).map(|(a, w)| a * w).sum();
        self.push(Tensor::scalar(s), Op::WeightedSum { x, weights }, "weighted_sum", &[x])
    }

    fn check_targets(&self, x: Var, target: &[f64], op: &'static str) -> Result<()> {
        if target.len() != self.value(x).len() {
            return Err(dim_err(op, format!("{} targets for {} predictions", target.len(), self.value(x).len())));
        }
        Ok(())
    }

    /// Elementwise focal loss on probabilities with soft targets in `[0, 1]`.
    pub fn focal_elems(&mut self, p: Var, target: Vec<f64>, alpha: f64, gamma: f64) -> Result<Var> {
        self.check_targets(p, &target, "focal")?;
        let data = self.value(p).data().iter().zip(&target).map(|(&p, &t)| focal_value(p, t, alpha, gamma)).collect();
        let inside: Vec<bool> = self.value(p).data().iter().map(|&p| in_clamp(p)).collect();
        self.note_bits(inside.into_iter());
        let t = Tensor { shape: self.shape(p).to_vec(), data };
        self.push(t, Op::Focal { p, target, alpha, gamma }, "focal", &[p])
    }

    /// Elementwise binary cross-entropy on probabilities.
    pub fn bce_elems(&mut self, p: Var, target: Vec<f64>) -> Result<Var> {
        self.check_targets(p, &target, "bce")?;
        let data = self.value(p).data().iter().zip(&target).map(|(&p, &t)| bce_value(p, t)).collect();
        let inside: Vec<bool> = self.value(p).data().iter().map(|&p| in_clamp(p)).collect();
        self.note_bits(inside.into_iter());
        let t = Tensor { shape: self.shape(p).to_vec(), data };
        self.push(t, Op::Bce { p, target }, "bce", &[p])
    }

    /// Elementwise Huber / smooth-L1 of `x - target`.
    pub fn smooth_l1_elems(&mut self, x: Var, target: Vec<f64>, delta: f64) -> Result<Var> {
        self.check_targets(x, &target, "smooth_l1")?;
        if delta <= 0.0 {
            return Err(TensorError::Config("smooth-L1 delta must be positive".into()));
        }
        let data = self.value(x).data().iter().zip(&target).map(|(&x, &t)| smooth_l1_value(x - t, delta)).collect();
        let quad: Vec<bool> = self.value(x).data().iter().zip(&target).map(|(&x, &t)| (x - t).abs() < delta).collect();
        self.note_bits(quad.into_iter());
        let t = Tensor { shape: self.shape(x).to_vec(), data };
        self.push(t, Op::SmoothL1 { x, target, delta }, "smooth_l1", &[x])
    }

    /// Reverse pass from a scalar. Leaf gradients accumulate across calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::Contract(format!("backward needs a scalar, got shape {:?}", self.shape(loss))));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(TensorError::NonFinite { op: "backward" });
                }
                let slot = self.leaf_grads.entry(i).or_insert_with(|| Tensor::zeros(self.nodes[i].value.shape()));
                for (a, b) in slot.data.iter_mut().zip(&g) {
                    *a += b;
                }
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let out = &nodes[i].value;
        let wants = |v: Var| nodes[v.0].requires_grad;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if nodes[v.0].requires_grad {
                let buf = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
                f(buf);
            }
        };
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = nodes[a.0].value.dims2();
                let n = out.dims2().1;
                if wants(*a) {
                    let bv = nodes[b.0].value.data();
                    acc(*a, &mut |da| gemm_strided(m, n, k, 1.0, g, (n as isize, 1), bv, (1, n as isize), 1.0, da));
                }
                if wants(*b) {
                    let av = nodes[a.0].value.data();
                    acc(*b, &mut |db| gemm_strided(k, m, n, 1.0, av, (1, k as isize), g, (n as isize, 1), 1.0, db));
                }
            }
            Op::MatMulT(a, b) => {
                let (m, k) = nodes[a.0].value.dims2();
                let n = out.dims2().1;
                if wants(*a) {
                    let bv = nodes[b.0].value.data();
                    acc(*a, &mut |da| gemm_strided(m, n, k, 1.0, g, (n as isize, 1), bv, (k as isize, 1), 1.0, da));
                }
                if wants(*b) {
                    let av = nodes[a.0].value.data();
                    acc(*b, &mut |db| gemm_strided(n, m, k, 1.0, g, (1, n as isize), av, (k as isize, 1), 1.0, db));
                }
            }
            Op::Add(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d -= g));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                acc(*a, &mut |d| (0..d.len()).for_each(|j| d[j] += g[j] * bv[j]));
                acc(*b, &mut |d| (0..d.len()).for_each(|j| d[j] += g[j] * av[j]));
            }
            Op::AddRow(x, row) => {
                let c = out.dims2().1;
                acc(*x, &mut |d| add_into(d, g));
                acc(*row, &mut |d| {
                    for gr in g.chunks(c) {
                        add_into(d, gr);
                    }
                });
            }
            Op::MulRow(x, row) => {
                let c = out.dims2().1;
                let (xv, rv) = (nodes[x.0].value.data(), nodes[row.0].value.data());
                acc(*x, &mut |d| {
                    for (dr, gr) in d.chunks_mut(c).zip(g.chunks(c)) {
                        (0..c).for_each(|j| dr[j] += gr[j] * rv[j]);
                    }
                });
                acc(*row, &mut |d| {
                    for (xr, gr) in xv.chunks(c).zip(g.chunks(c)) {
                        (0..c).for_each(|j| d[j] += gr[j] * xr[j]);
                    }
                });
            }
            Op::Scale(x, c) => acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += c * g)),
            Op::Relu(x) => {
                let y = out.data();
                acc(*x, &mut |d| {
                    (0..d.len()).for_each(|j| {
                        if y[j] > 0.0 {
                            d[j] += g[j]
                        }
                    })
                });
            }
            Op::Sigmoid(x) => {
                let y = out.data();
                acc(*x, &mut |d| (0..d.len()).for_each(|j| d[j] += g[j] * y[j] * (1.0 - y[j])));
            }
            Op::Softmax { x, over_rows } => {
                let (r, c) = out.dims2();
                let y = out.data();
                if *over_rows {
                    let segs = Segments::from_counts(&[r]);
                    acc(*x, &mut |d| segment_softmax_bwd(y, g, c, &segs, d));
                } else {
                    acc(*x, &mut |d| {
                        for ((dr, yr), gr) in d.chunks_mut(c).zip(y.chunks(c)).zip(g.chunks(c)) {
                            let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                            (0..c).for_each(|j| dr[j] += yr[j] * (gr[j] - dot));
                        }
                    });
                }
            }
            Op::SegmentSoftmax { x, segs } => {
                let c = out.dims2().1;
                acc(*x, &mut |d| segment_softmax_bwd(out.data(), g, c, segs, d));
            }
            Op::SegmentSum { x, segs } => {
                let c = out.dims2().1;
                acc(*x, &mut |d| {
                    for s in 0..segs.count() {
                        let gs = &g[s * c..(s + 1) * c];
                        for r in segs.range(s) {
                            add_into(&mut d[r * c..(r + 1) * c], gs);
                        }
                    }
                });
            }
            Op::SegmentMax { x, argmax } => {
                let c = out.dims2().1;
                acc(*x, &mut |d| {
                    for (k, &row) in argmax.iter().enumerate() {
                        d[row * c + k % c] += g[k];
                    }
                });
            }
            Op::GatherRows { x, idx } => {
                let c = out.dims2().1;
                acc(*x, &mut |d| {
                    for (k, &r) in idx.iter().enumerate() {
                        add_into(&mut d[r * c..(r + 1) * c], &g[k * c..(k + 1) * c]);
                    }
                });
            }
            Op::ScatterRows { base, values, idx } => {
                let c = out.dims2().1;
                acc(*base, &mut |d| {
                    add_into(d, g);
                    for &r in idx.iter() {
                        d[r * c..(r + 1) * c].iter_mut().zip(&g[r * c..(r + 1) * c]).for_each(|(d, g)| *d -= g);
                    }
                });
                acc(*values, &mut |d| {
                    for (k, &r) in idx.iter().enumerate() {
                        add_into(&mut d[k * c..(k + 1) * c], &g[r * c..(r + 1) * c]);
                    }
                });
            }
            Op::SliceCols { x, start } => {
                let c = nodes[x.0].value.dims2().1;
                let w = out.dims2().1;
                acc(*x, &mut |d| {
                    for (dr, gr) in d.chunks_mut(c).zip(g.chunks(w.max(1))) {
                        add_into(&mut dr[*start..*start + w], gr);
                    }
                });
            }
            Op::NormalizeRows { x, inv_std } => {
                let c = out.dims2().1;
                let y = out.data();
                acc(*x, &mut |d| {
                    for (i, inv) in inv_std.iter().enumerate() {
                        let (yr, gr) = (&y[i * c..(i + 1) * c], &g[i * c..(i + 1) * c]);
                        let mg = gr.iter().sum::<f64>() / c as f64;
                        let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for j in 0..c {
                            d[i * c + j] += inv * (gr[j] - mg - yr[j] * mgy);
                        }
                    }
                });
            }
            Op::NormalizeCols { x, inv_std } => {
                let (r, c) = out.dims2();
                let y = out.data();
                acc(*x, &mut |d| {
                    for (j, inv) in inv_std.iter().enumerate() {
                        let mut mg = 0.0;
                        let mut mgy = 0.0;
                        for i in 0..r {
                            mg += g[i * c + j];
                            mgy += g[i * c + j] * y[i * c + j];
                        }
                        mg /= r as f64;
                        mgy /= r as f64;
                        for i in 0..r {
                            d[i * c + j] += inv * (g[i * c + j] - mg - y[i * c + j] * mgy);
                        }
                    }
                });
            }
            Op::Reshape(x) => acc(*x, &mut |d| add_into(d, g)),
            Op::Sum(x) => acc(*x, &mut |d| d.iter_mut().for_each(|d| *d += g[0])),
            Op::WeightedSum { x, weights } => acc(*x, &mut |d| d.iter_mut().zip(weights).for_each(|(d, w)| *d += g[0] * w)),
            Op::Focal { p, target, alpha, gamma } => {
                let pv = nodes[p.0].value.data();
                acc(*p, &mut |d| {
                    for j in 0..d.len() {
                        d[j] += g[j] * focal_grad(pv[j], target[j], *alpha, *gamma);
                    }
                });
            }
            Op::Bce { p, target } => {
                let pv = nodes[p.0].value.data();
                acc(*p, &mut |d| {
                    for j in 0..d.len() {
                        d[j] += g[j] * bce_grad(pv[j], target[j]);
                    }
                });
            }
            Op::SmoothL1 { x, target, delta } => {
                let xv = nodes[x.0].value.data();
                acc(*x, &mut |d| {
                    for j in 0..d.len() {
                        let r = xv[j] - target[j];
                        let s = if r.abs() < *delta { r / delta } else { r.signum() };
                        d[j] += g[j] * s;
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

pub(crate) fn sigmoid(a: f64) -> f64 {
    if a >= 0.0 {
        1.0 / (1.0 + (-a).exp())
    } else {
        let e = a.exp();
        e / (1.0 + e)
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}

fn segment_softmax_fwd(xs: &[f64], c: usize, segs: &Segments) -> Vec<f64> {
    let mut out = vec![0.0; xs.len()];
    let mut max = vec![0.0; c];
    let mut sum = vec![0.0; c];
    for s in 0..segs.count() {
        let range = segs.range(s);
        max.iter_mut().for_each(|m| *m = f64::NEG_INFINITY);
        sum.iter_mut().for_each(|m| *m = 0.0);
        for i in range.clone() {
            for j in 0..c {
                max[j] = max[j].max(xs[i * c + j]);
            }
        }
        for i in range.clone() {
            for j in 0..c {
                let e = (xs[i * c + j] - max[j]).exp();
                out[i * c + j] = e;
                sum[j] += e;
            }
        }
        for i in range {
            for j in 0..c {
                out[i * c + j] /= sum[j];
            }
        }
    }
    out
}

fn segment_softmax_bwd(y: &[f64], g: &[f64], c: usize, segs: &Segments, d: &mut [f64]) {
    let mut dot = vec![0.0; c];
    for s in 0..segs.count() {
        dot.iter_mut().for_each(|v| *v = 0.0);
        for i in segs.range(s) {
            for j in 0..c {
                dot[j] += y[i * c + j] * g[i * c + j];
            }
        }
        for i in segs.range(s) {
            for j in 0..c {
                d[i * c + j] += y[i * c + j] * (g[i * c + j] - dot[j]);
            }
        }
    }
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

fn in_clamp(p: f64) -> bool {
    (PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&p)
}

pub(crate) fn focal_value(p: f64, t: f64, alpha: f64, gamma: f64) -> f64 {
    let p = clamp_prob(p);
    let pos = t * alpha * (1.0 - p).powf(gamma) * p.ln();
    let neg = (1.0 - t) * (1.0 - alpha) * p.powf(gamma) * (1.0 - p).ln();
    -(pos + neg)
}

fn focal_grad(p: f64, t: f64, alpha: f64, gamma: f64) -> f64 {
    if !in_clamp(p) {
        return 0.0;
    }
    let q = 1.0 - p;
    let dpos = -gamma * q.powf(gamma - 1.0) * p.ln() + q.powf(gamma) / p;
    let dneg = gamma * p.powf(gamma - 1.0) * q.ln() - p.powf(gamma) / q;
    // γ = 0 makes the power terms 0·∞ at the clamp edges; they vanish.
    let dpos = if gamma == 0.0 { 1.0 / p } else { dpos };
    let dneg = if gamma == 0.0 { -1.0 / q } else { dneg };
    -(t * alpha * dpos + (1.0 - t) * (1.0 - alpha) * dneg)
}

pub(crate) fn bce_value(p: f64, t: f64) -> f64 {
    let p = clamp_prob(p);
    -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
}

fn bce_grad(p: f64, t: f64) -> f64 {
    if !in_clamp(p) {
        return 0.0;
    }
    -t / p + (1.0 - t) / (1.0 - p)
}

pub(crate) fn smooth_l1_value(r: f64, delta: f64) -> f64 {
    if r.abs() < delta {
        0.5 * r * r / delta
    } else {
        r.abs() - 0.5 * delta
    }
}
