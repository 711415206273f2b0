use rand::Rng;

use crate::tensor::nn::{Ctx, LinearLayer, Mlp, ParamStore};
use crate::tensor::{Result, Var};

/// Shared MLP followed by a confidence and a refinement branch.
#[derive(Debug, Clone)]
pub struct DetectionHead {
    pub shared: Mlp,
    pub confidence: LinearLayer,
    pub refine: LinearLayer,
}

#[derive(Debug, Clone, Copy)]
pub struct HeadOutput {
    /// `[M, 1]` probabilities.
    pub confidence: Var,
    /// `[M, 7]` predicted residues.
    pub residues: Var,
}

impl DetectionHead {
    pub fn new(store: &mut ParamStore, name: &str, d_a: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        DetectionHead {
            shared: Mlp::new(store, &format!("{name}.shared"), &[d_a, hidden, hidden], rng),
            confidence: LinearLayer::new(store, &format!("{name}.conf"), hidden, 1, rng),
            refine: LinearLayer::new(store, &format!("{name}.refine"), hidden, 7, rng),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, roi_features: Var) -> Result<HeadOutput> {
        let h = self.shared.forward(ctx, roi_features)?;
        let h = ctx.tape.relu(h)?;
        let c = self.confidence.forward(ctx, h)?;
        let confidence = ctx.tape.sigmoid(c)?;
        let residues = self.refine.forward(ctx, h)?;
        Ok(HeadOutput { confidence, residues })
    }
}

/// Per-point foreground / offset / part predictor for one scale.
#[derive(Debug, Clone)]
pub struct AuxHead {
    pub mlp: Mlp,
}

#[derive(Debug, Clone, Copy)]
pub struct AuxPrediction {
    /// `[N, 1]` probabilities.
    pub foreground: Var,
    /// `[N, 3]` meters.
    pub offsets: Var,
    /// `[N, 3]` probabilities.
    pub parts: Var,
}

pub const AUX_HIDDEN: usize = 64;

impl AuxHead {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, rng: &mut impl Rng) -> Self {
        AuxHead { mlp: Mlp::new(store, name, &[channels, AUX_HIDDEN, AUX_HIDDEN, 7], rng) }
    }

    pub fn forward(&self, ctx: &mut Ctx, features: Var) -> Result<AuxPrediction> {
        let out = self.mlp.forward(ctx, features)?;
        let f = ctx.tape.slice_cols(out, 0, 1)?;
        let foreground = ctx.tape.sigmoid(f)?;
        let offsets = ctx.tape.slice_cols(out, 1, 4)?;
        let p = ctx.tape.slice_cols(out, 4, 7)?;
        let parts = ctx.tape.sigmoid(p)?;
        Ok(AuxPrediction { foreground, offsets, parts })
    }
}
