use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::nn::{Ctx, LinearLayer, Mlp, ParamStore};
use crate::tensor::{Result, Segments, Tensor, TensorError, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionKind {
    /// One weight per point per channel.
    #[default]
    Vector,
    /// One weight per point per head.
    Multihead,
}

impl FromStr for AttentionKind {
    type Err = TensorError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vector" => Ok(AttentionKind::Vector),
            "multihead" => Ok(AttentionKind::Multihead),
            other => Err(TensorError::Config(format!("unknown attention kind {other:?}"))),
        }
    }
}

/// Query/key/value projections plus the relation MLP `γ` (vector kind only).
#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub kind: AttentionKind,
    pub heads: usize,
    pub phi: LinearLayer,
    pub psi: LinearLayer,
    pub alpha: LinearLayer,
    pub gamma: Mlp,
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionOutput {
    /// `[segments, d_a]`.
    pub out: Var,
    /// Normalized weights, `[rows, d_a]` for vector and `[rows, heads]` for
    /// multihead.
    pub weights: Var,
}

impl AttentionParams {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        kind: AttentionKind,
        d_a: usize,
        hidden: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if kind == AttentionKind::Multihead && (heads == 0 || d_a % heads != 0) {
            return Err(TensorError::Config(format!("d_a {d_a} is not divisible by {heads} heads")));
        }
        let phi = LinearLayer::new(store, &format!("{name}.phi"), d_a, d_a, rng);
        let psi = LinearLayer::new(store, &format!("{name}.psi"), d_a, d_a, rng);
        let alpha = LinearLayer::new(store, &format!("{name}.alpha"), d_a, d_a, rng);
        let gamma = match kind {
            AttentionKind::Vector => Mlp::new(store, &format!("{name}.gamma"), &[d_a, hidden, d_a], rng),
            AttentionKind::Multihead => Mlp::identity(),
        };
        Ok(AttentionParams { kind, heads, phi, psi, alpha, gamma })
    }

    /// Cross-attention of each segment's query row `r[s]` over the rows of
    /// `feats` in segment `s`, with position encoding `zeta` added to the
    /// relation and the value. Every segment must be non-empty.
    pub fn forward(&self, ctx: &mut Ctx, r: Var, feats: Var, zeta: Var, segs: &Arc<Segments>) -> Result<AttentionOutput> {
        if ctx.tape.shape(r)[0] != segs.count() {
            return Err(TensorError::Contract("one query row per pooled set".into()));
        }
        if (0..segs.count()).any(|s| segs.range(s).is_empty()) {
            return Err(TensorError::Contract("attention over an empty pooled set".into()));
        }
        let q = self.phi.forward(ctx, r)?;
        let qg = ctx.tape.gather_rows(q, Arc::new(segs.row_ids()))?;
        let k = self.psi.forward(ctx, feats)?;
        let v = self.alpha.forward(ctx, feats)?;
        let v = ctx.tape.add(v, zeta)?;
        match self.kind {
            AttentionKind::Vector => {
                let rel = ctx.tape.sub(qg, k)?;
                let rel = ctx.tape.add(rel, zeta)?;
                let logits = self.gamma.forward(ctx, rel)?;
                let weights = ctx.tape.segment_softmax(logits, segs.clone())?;
                let wv = ctx.tape.mul(weights, v)?;
                let out = ctx.tape.segment_sum(wv, segs.clone())?;
                Ok(AttentionOutput { out, weights })
            }
            AttentionKind::Multihead => {
                let d = ctx.tape.shape(q)[1];
                let dh = d / self.heads;
                let mut e = Tensor::zeros(&[d, self.heads]);
                for c in 0..d {
                    e.data_mut()[c * self.heads + c / dh] = 1.0;
                }
                let e = ctx.tape.constant(e);
                let k = ctx.tape.add(k, zeta)?;
                let qk = ctx.tape.mul(qg, k)?;
                let logits = ctx.tape.matmul(qk, e)?;
                let logits = ctx.tape.scale(logits, 1.0 / (dh as f64).sqrt())?;
                let weights = ctx.tape.segment_softmax(logits, segs.clone())?;
                let expanded = ctx.tape.matmul_t(weights, e)?;
                let wv = ctx.tape.mul(expanded, v)?;
                let out = ctx.tape.segment_sum(wv, segs.clone())?;
                Ok(AttentionOutput { out, weights })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::new((0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect(), vec![r, c]).unwrap()
    }

    fn setup(kind: AttentionKind) -> (ParamStore, AttentionParams) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = AttentionParams::new(&mut store, "attn", kind, 8, 16, 4, &mut rng).unwrap();
        (store, p)
    }

    fn run(kind: AttentionKind, f: &Tensor, zeta: &Tensor) -> Vec<f64> {
        let (store, p) = setup(kind);
        let mut ctx = Ctx::new(&store, false);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let r = ctx.tape.constant(rand_matrix(&mut rng, 1, 8));
        let fv = ctx.tape.constant(f.clone());
        let z = ctx.tape.constant(zeta.clone());
        let segs = Arc::new(Segments::from_counts(&[f.shape()[0]]));
        let out = p.forward(&mut ctx, r, fv, z, &segs).unwrap();
        ctx.tape.value(out.out).data().to_vec()
    }

    fn value_of(kind: AttentionKind, f: &Tensor, zeta: &Tensor) -> Vec<f64> {
        let (store, p) = setup(kind);
        let mut ctx = Ctx::new(&store, false);
        let fv = ctx.tape.constant(f.clone());
        let z = ctx.tape.constant(zeta.clone());
        let v = p.alpha.forward(&mut ctx, fv).unwrap();
        let v = ctx.tape.add(v, z).unwrap();
        ctx.tape.value(v).data().to_vec()
    }

    #[test]
    fn single_point_returns_its_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (f, z) = (rand_matrix(&mut rng, 1, 8), rand_matrix(&mut rng, 1, 8));
        for kind in [AttentionKind::Vector, AttentionKind::Multihead] {
            let out = run(kind, &f, &z);
            let want = value_of(kind, &f, &z);
            assert!(out.iter().zip(&want).all(|(a, b)| (a - b).abs() < 1e-15), "{kind:?}");
        }
    }

    #[test]
    fn identical_points_split_evenly() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (f1, z1) = (rand_matrix(&mut rng, 1, 8), rand_matrix(&mut rng, 1, 8));
        let f = Tensor::from_rows(&[f1.row(0).to_vec(), f1.row(0).to_vec()]).unwrap();
        let z = Tensor::from_rows(&[z1.row(0).to_vec(), z1.row(0).to_vec()]).unwrap();
        let out = run(AttentionKind::Vector, &f, &z);
        let want = value_of(AttentionKind::Vector, &f1, &z1);
        assert!(out.iter().zip(&want).all(|(a, b)| (a - b).abs() < 1e-14));
    }

    #[test]
    fn indivisible_heads_rejected() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert!(matches!(
            AttentionParams::new(&mut store, "a", AttentionKind::Multihead, 10, 16, 4, &mut rng),
            Err(TensorError::Config(_))
        ));
    }

    #[test]
    fn empty_segment_is_contract_error() {
        let (store, p) = setup(AttentionKind::Vector);
        let mut ctx = Ctx::new(&store, false);
        let r = ctx.tape.constant(Tensor::zeros(&[1, 8]));
        let f = ctx.tape.constant(Tensor::zeros(&[0, 8]));
        let segs = Arc::new(Segments::from_counts(&[0]));
        assert!(matches!(p.forward(&mut ctx, r, f, f, &segs), Err(TensorError::Contract(_))));
    }
}
