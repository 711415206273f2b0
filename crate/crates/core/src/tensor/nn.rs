//! Parameter storage and the small set of layers the model is built from.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Result, Tape, Tensor, TensorError, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    /// Position in the owning store.
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
struct Entry {
    name: String,
    value: Tensor,
    grad: Tensor,
    trainable: bool,
}

/// Named parameters plus non-trainable buffers (running statistics).
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor under a unique dotted path.
    ///
    /// Panics on a duplicate name: parameter trees are built once, in code.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let grad = Tensor::zeros(value.shape());
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(Entry { name, value, grad, trainable });
        ParamId(self.entries.len() - 1)
    }

    /// Uniform in `[-1/√fan_in, 1/√fan_in]`.
    pub fn add_uniform(&mut self, name: impl Into<String>, shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
        self.add(name, Tensor { shape: shape.to_vec(), data }, true)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].grad
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].grad
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    /// Total number of trainable scalars.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.value.len()).sum()
    }

    pub fn bind(&self, tape: &mut Tape, id: ParamId) -> Var {
        tape.bind(id.0, &self.entries[id.0].value)
    }

    /// Adds the leaf gradients recorded on `tape` into the stored gradients.
    pub fn accumulate_grads(&mut self, tape: &Tape) {
        for (key, var) in tape.bindings() {
            if let Some(g) = tape.grad(var) {
                let dst = self.entries[key].grad.data_mut();
                dst.iter_mut().zip(g.data()).for_each(|(d, s)| *d += s);
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn apply_stat_updates(&mut self, updates: Vec<(ParamId, Vec<f64>)>) {
        for (id, data) in updates {
            self.entries[id.0].value.data_mut().copy_from_slice(&data);
        }
    }
}

/// One forward pass: a fresh tape over read-only parameters.
pub struct Ctx<'a> {
    pub tape: Tape,
    pub params: &'a ParamStore,
    pub train: bool,
    stat_updates: Vec<(ParamId, Vec<f64>)>,
}

impl<'a> Ctx<'a> {
    pub fn new(params: &'a ParamStore, train: bool) -> Self {
        Ctx { tape: Tape::new(), params, train, stat_updates: Vec::new() }
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        self.params.bind(&mut self.tape, id)
    }

    /// Ends the pass, returning the tape and any pending running-stat writes.
    pub fn finish(self) -> (Tape, Vec<(ParamId, Vec<f64>)>) {
        (self.tape, self.stat_updates)
    }
}

/// `y = x · Wᵀ + b` with `W: [out, in]`.
#[derive(Debug, Clone, Copy)]
pub struct LinearLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl LinearLayer {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let weight = store.add_uniform(format!("{name}.weight"), &[out_dim, in_dim], in_dim, rng);
        let bias = store.add_uniform(format!("{name}.bias"), &[out_dim], in_dim, rng);
        LinearLayer { weight, bias, in_dim, out_dim }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let w = ctx.p(self.weight);
        let b = ctx.p(self.bias);
        let y = ctx.tape.matmul_t(x, w)?;
        ctx.tape.add_row(y, b)
    }
}

/// Linear layers with ReLU between them and nothing after the last.
/// An empty layer list is the identity map.
#[derive(Debug, Clone, Default)]
pub struct Mlp {
    pub layers: Vec<LinearLayer>,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, dims: &[usize], rng: &mut impl Rng) -> Self {
        let layers =
            dims.windows(2).enumerate().map(|(i, d)| LinearLayer::new(store, &format!("{name}.{i}"), d[0], d[1], rng)).collect();
        Mlp { layers }
    }

    pub fn identity() -> Self {
        Mlp { layers: Vec::new() }
    }

    pub fn forward(&self, ctx: &mut Ctx, mut x: Var) -> Result<Var> {
        for (i, layer) in self.layers.iter().enumerate() {
            if i > 0 {
                x = ctx.tape.relu(x)?;
            }
            x = layer.forward(ctx, x)?;
        }
        Ok(x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    /// Normalizes each column over the rows of the batch.
    Batch,
    /// Normalizes each row over its channels.
    Layer,
}

impl std::str::FromStr for NormKind {
    type Err = TensorError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "batch" => Ok(NormKind::Batch),
            "layer" => Ok(NormKind::Layer),
            other => Err(TensorError::Config(format!("unknown norm kind {other:?}"))),
        }
    }
}

pub const NORM_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy)]
pub struct NormLayer {
    pub kind: NormKind,
    pub scale: ParamId,
    pub shift: ParamId,
    running: Option<(ParamId, ParamId)>,
    pub eps: f64,
}

impl NormLayer {
    pub fn new(store: &mut ParamStore, name: &str, kind: NormKind, channels: usize) -> Self {
        let scale = store.add(format!("{name}.scale"), Tensor::vector(vec![1.0; channels]), true);
        let shift = store.add(format!("{name}.shift"), Tensor::zeros(&[channels]), true);
        let running = (kind == NormKind::Batch).then(|| {
            (
                store.add(format!("{name}.running_mean"), Tensor::zeros(&[channels]), false),
                store.add(format!("{name}.running_var"), Tensor::vector(vec![1.0; channels]), false),
            )
        });
        NormLayer { kind, scale, shift, running, eps: NORM_EPS }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let normed = match (self.kind, self.running) {
            (NormKind::Layer, _) => ctx.tape.normalize_rows(x, self.eps)?,
            (NormKind::Batch, Some((rm, rv))) if ctx.train => {
                let (y, mean, var) = ctx.tape.normalize_cols(x, self.eps)?;
                let rows = ctx.tape.shape(x)[0] as f64;
                let unbias = if rows > 1.0 { rows / (rows - 1.0) } else { 1.0 };
                let blend = |old: &[f64], new: &[f64], k: f64| -> Vec<f64> {
                    old.iter().zip(new).map(|(o, n)| (1.0 - BN_MOMENTUM) * o + BN_MOMENTUM * n * k).collect()
                };
                let new_mean = blend(ctx.params.value(rm).data(), &mean, 1.0);
                let new_var = blend(ctx.params.value(rv).data(), &var, unbias);
                ctx.stat_updates.push((rm, new_mean));
                ctx.stat_updates.push((rv, new_var));
                y
            }
            (NormKind::Batch, Some((rm, rv))) => {
                let neg_mean = ctx.params.value(rm).data().iter().map(|m| -m).collect();
                let inv: Vec<f64> = ctx.params.value(rv).data().iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
                let neg_mean = ctx.tape.constant(Tensor::vector(neg_mean));
                let inv = ctx.tape.constant(Tensor::vector(inv));
                let centered = ctx.tape.add_row(x, neg_mean)?;
                ctx.tape.mul_row(centered, inv)?
            }
            (NormKind::Batch, None) => unreachable!("batch norm always carries running stats"),
        };
        let scale = ctx.p(self.scale);
        let shift = ctx.p(self.shift);
        let y = ctx.tape.mul_row(normed, scale)?;
        ctx.tape.add_row(y, shift)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn init_bounds_follow_fan_in() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let l = LinearLayer::new(&mut store, "l", 16, 4, &mut rng);
        assert!(store.value(l.weight).data().iter().all(|v| v.abs() <= 0.25));
        assert_eq!(store.value(l.weight).shape(), &[4, 16]);
    }

    #[test]
    fn linear_forward_matches_manual() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::from_rows(&[vec![1.0, 2.0], vec![0.0, -1.0], vec![3.0, 0.5]]).unwrap(), true);
        let b = store.add("b", Tensor::vector(vec![0.1, 0.2, 0.3]), true);
        let layer = LinearLayer { weight: w, bias: b, in_dim: 2, out_dim: 3 };
        let mut ctx = Ctx::new(&store, true);
        let x = ctx.tape.constant(Tensor::from_rows(&[vec![1.0, 1.0]]).unwrap());
        let y = layer.forward(&mut ctx, x).unwrap();
        let got = ctx.tape.value(y).data().to_vec();
        let want = [3.1, -0.8, 3.8];
        for (g, w) in got.iter().zip(want) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_mlp_is_identity() {
        let store = ParamStore::new();
        let mut ctx = Ctx::new(&store, true);
        let x = ctx.tape.constant(Tensor::vector(vec![1.0, -2.0]).reshape(vec![1, 2]).unwrap());
        assert_eq!(Mlp::identity().forward(&mut ctx, x).unwrap(), x);
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let mut store = ParamStore::new();
        let norm = NormLayer::new(&mut store, "n", NormKind::Layer, 4);
        let mut ctx = Ctx::new(&store, true);
        let x = ctx.tape.constant(Tensor::from_rows(&[vec![1.0, 2.0, 3.0, 4.0], vec![-1.0, 0.0, 5.0, 2.0]]).unwrap());
        let y = norm.forward(&mut ctx, x).unwrap();
        for row in ctx.tape.value(y).data().chunks(4) {
            let mean: f64 = row.iter().sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12);
        }
    }

    #[test]
    fn batch_norm_eval_uses_running_stats() {
        let mut store = ParamStore::new();
        let norm = NormLayer::new(&mut store, "n", NormKind::Batch, 2);
        let rows = Tensor::from_rows(&[vec![1.0, 10.0], vec![3.0, 20.0]]).unwrap();
        let updates = {
            let mut ctx = Ctx::new(&store, true);
            let x = ctx.tape.constant(rows.clone());
            norm.forward(&mut ctx, x).unwrap();
            ctx.finish().1
        };
        store.apply_stat_updates(updates);
        let rm = store.value(store.id("n.running_mean").unwrap()).data().to_vec();
        assert!((rm[0] - 0.2).abs() < 1e-12 && (rm[1] - 1.5).abs() < 1e-12);

        let mut ctx = Ctx::new(&store, false);
        let x = ctx.tape.constant(rows);
        let y = norm.forward(&mut ctx, x).unwrap();
        let rv = ctx.params.value(ctx.params.id("n.running_var").unwrap()).data()[0];
        let want = (1.0 - 0.2) / (rv + NORM_EPS).sqrt();
        assert!((ctx.tape.value(y).data()[0] - want).abs() < 1e-12);
    }
}
