use std::sync::Arc;

use rand::Rng;

use super::attention::{AttentionKind, AttentionParams};
use super::encoding::{encoding_input, AUGMENTED_DIM};
use super::pool::PooledSet;
use crate::geometry::Roi;
use crate::tensor::nn::{Ctx, LinearLayer, Mlp, NormKind, NormLayer, ParamStore};
use crate::tensor::{Result, Segments, Tensor, TensorError, Var};

/// One attention module: input projection, position encoding, attention,
/// and the two residual + norm stages.
#[derive(Debug, Clone)]
pub struct RfeBlock {
    pub proj: LinearLayer,
    pub pos: Mlp,
    pub attn: AttentionParams,
    pub norm1: NormLayer,
    pub mlp: Mlp,
    pub norm2: NormLayer,
}

#[allow(clippy::too_many_arguments)]
impl RfeBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        d_a: usize,
        hidden: usize,
        kind: AttentionKind,
        heads: usize,
        norm: NormKind,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(RfeBlock {
            proj: LinearLayer::new(store, &format!("{name}.proj"), in_channels, d_a, rng),
            pos: Mlp::new(store, &format!("{name}.pos"), &[AUGMENTED_DIM, hidden, d_a], rng),
            attn: AttentionParams::new(store, &format!("{name}.attn"), kind, d_a, hidden, heads, rng)?,
            norm1: NormLayer::new(store, &format!("{name}.norm1"), norm, d_a),
            mlp: Mlp::new(store, &format!("{name}.mlp"), &[d_a, hidden, d_a], rng),
            norm2: NormLayer::new(store, &format!("{name}.norm2"), norm, d_a),
        })
    }

    /// Projected features and position encodings of the concatenated
    /// non-empty pooled sets.
    pub fn embed(&self, ctx: &mut Ctx, source: Var, pooled: &[&PooledSet], rois: &[&Roi]) -> Result<(Var, Var, Arc<Segments>)> {
        let idx: Vec<usize> = pooled.iter().flat_map(|p| p.indices.iter().copied()).collect();
        let segs = Arc::new(Segments::from_counts(&pooled.iter().map(|p| p.len()).collect::<Vec<_>>()));
        let raw = ctx.tape.gather_rows(source, Arc::new(idx))?;
        let feats = self.proj.forward(ctx, raw)?;
        let mut enc = Vec::with_capacity(segs.rows() * AUGMENTED_DIM);
        for (p, roi) in pooled.iter().zip(rois) {
            for &q in &p.canonical {
                enc.extend_from_slice(&encoding_input(q, roi));
            }
        }
        let enc = ctx.tape.constant(Tensor::new(enc, vec![segs.rows(), AUGMENTED_DIM])?);
        let zeta = self.pos.forward(ctx, enc)?;
        Ok((feats, zeta, segs))
    }

    /// `r ← Norm(r + Attn(r, P)); r ← Norm(r + MLP(r))` for ROIs with a
    /// non-empty pooled set; the other rows of `r` pass through unchanged.
    pub fn forward(&self, ctx: &mut Ctx, r: Var, source: Var, pooled: &[PooledSet], rois: &[Roi]) -> Result<Var> {
        if pooled.len() != rois.len() || ctx.tape.shape(r)[0] != rois.len() {
            return Err(TensorError::Contract("one pooled set and one feature row per ROI".into()));
        }
        let active: Vec<usize> = (0..pooled.len()).filter(|&i| !pooled[i].is_empty()).collect();
        if active.is_empty() {
            return Ok(r);
        }
        let sets: Vec<&PooledSet> = active.iter().map(|&i| &pooled[i]).collect();
        let boxes: Vec<&Roi> = active.iter().map(|&i| &rois[i]).collect();
        let (feats, zeta, segs) = self.embed(ctx, source, &sets, &boxes)?;
        let all = active.len() == rois.len();
        let idx = Arc::new(active);
        let r_act = if all { r } else { ctx.tape.gather_rows(r, idx.clone())? };
        let att = self.attn.forward(ctx, r_act, feats, zeta, &segs)?;
        let h = ctx.tape.add(r_act, att.out)?;
        let h = self.norm1.forward(ctx, h)?;
        let m = self.mlp.forward(ctx, h)?;
        let h = ctx.tape.add(h, m)?;
        let h = self.norm2.forward(ctx, h)?;
        if all {
            Ok(h)
        } else {
            ctx.tape.scatter_rows(r, h, idx)
        }
    }
}
