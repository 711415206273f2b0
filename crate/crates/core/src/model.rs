//! The full refinement network: surrogate encoder, ROI feature encoder,
//! detection head and auxiliary point heads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::geometry::Roi;
use crate::heads::{
    aux_loss, decode_residue, make_refine_targets, refine_loss, total_loss, AuxHead, DetectionHead, HeadOutput, RefineConfig,
    RefineTargets,
};
use crate::rfe::{Rfe, RfeConfig, ScaleInput};
use crate::tensor::nn::{Ctx, ParamStore};
use crate::tensor::Var;
use crate::voxel::{interpret_positions, make_aux_targets, EncodedScale, Encoder, GridSpec, Occupancy, CHANNELS};
use crate::Result;

/// Scales that carry auxiliary supervision.
pub const AUX_SCALES: [usize; 2] = [3, 4];

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub grid: GridSpec,
    pub rfe: RfeConfig,
    pub head_hidden: usize,
    pub refine: RefineConfig,
    pub refine_loss: bool,
    pub aux_loss: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            grid: GridSpec::new([0.0, -40.0, -1.0], [70.4, 40.0, 3.0], [0.05, 0.05, 0.1]).expect("default grid"),
            rfe: RfeConfig::default(),
            head_hidden: 256,
            refine: RefineConfig::default(),
            refine_loss: true,
            aux_loss: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub encoder: Encoder,
    pub rfe: Rfe,
    pub head: DetectionHead,
    pub aux: Vec<(usize, AuxHead)>,
}

#[derive(Debug, Clone)]
pub struct Forward {
    pub scales: Vec<EncodedScale>,
    pub roi_features: Var,
    pub head: HeadOutput,
}

#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub total: Var,
    pub refine: Option<Var>,
    pub aux: Option<Var>,
}

impl Model {
    /// Registers every parameter in `store`, initialized from `seed`.
    pub fn new(store: &mut ParamStore, cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.refine.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = Encoder::new(store, "encoder", &mut rng);
        let rfe = Rfe::new(store, "rfe", cfg.rfe.clone(), &mut rng)?;
        let head = DetectionHead::new(store, "head", cfg.rfe.d_a, cfg.head_hidden, &mut rng);
        let aux = if cfg.aux_loss {
            AUX_SCALES.iter().map(|&s| (s, AuxHead::new(store, &format!("aux.s{s}"), CHANNELS[s - 1], &mut rng))).collect()
        } else {
            Vec::new()
        };
        Ok(Model { cfg, encoder, rfe, head, aux })
    }

    /// Encodes the scene and scores `rois`. `roi_keys` seed pooling.
    pub fn forward(&self, ctx: &mut Ctx, occ: &Occupancy, rois: &[Roi], roi_keys: &[u64], seed: u64) -> Result<Forward> {
        let scales = self.encoder.forward(ctx, occ)?;
        let inputs: Vec<ScaleInput> = scales.iter().map(|s| ScaleInput::from_encoded(s, &self.cfg.grid)).collect();
        let roi_features = self.rfe.compute_roi_features(ctx, &inputs, rois, roi_keys, seed)?;
        let head = self.head.forward(ctx, roi_features)?;
        Ok(Forward { scales, roi_features, head })
    }

    /// Training objective for one scene; also returns the refinement
    /// targets it used.
    pub fn loss(
        &self,
        ctx: &mut Ctx,
        occ: &Occupancy,
        rois: &[Roi],
        roi_keys: &[u64],
        gts: &[Roi],
        seed: u64,
    ) -> Result<(LossTerms, RefineTargets)> {
        let fwd = self.forward(ctx, occ, rois, roi_keys, seed)?;
        let targets = make_refine_targets(rois, gts, &self.cfg.refine)?;
        let refine = if self.cfg.refine_loss {
            Some(refine_loss(ctx, fwd.head.confidence, fwd.head.residues, &targets, &self.cfg.refine)?)
        } else {
            None
        };
        let aux = if self.cfg.aux_loss && !self.aux.is_empty() {
            let mut terms = Vec::new();
            for (scale, head) in &self.aux {
                let enc = &fwd.scales[scale - 1];
                let positions = interpret_positions(&enc.keys, *scale, &self.cfg.grid);
                if positions.is_empty() {
                    continue;
                }
                let pred = head.forward(ctx, enc.features)?;
                let t = make_aux_targets(&positions, gts);
                terms.push(aux_loss(ctx, &pred, &t, &self.cfg.refine)?);
            }
            Some(total_loss(ctx, &terms)?)
        } else {
            None
        };
        let enabled: Vec<Var> = refine.into_iter().chain(aux).collect();
        let total = total_loss(ctx, &enabled)?;
        Ok((LossTerms { total, refine, aux }, targets))
    }

    /// Refined boxes carrying the predicted confidence, in `rois` order.
    pub fn predict(&self, store: &ParamStore, occ: &Occupancy, rois: &[Roi], roi_keys: &[u64], seed: u64) -> Result<Vec<Roi>> {
        if rois.is_empty() {
            return Ok(Vec::new());
        }
        let mut ctx = Ctx::new(store, false);
        let fwd = self.forward(&mut ctx, occ, rois, roi_keys, seed)?;
        let conf = ctx.tape.value(fwd.head.confidence).data();
        let res = ctx.tape.value(fwd.head.residues);
        Ok(rois
            .iter()
            .enumerate()
            .map(|(i, roi)| {
                let r = res.row(i);
                let delta = [r[0], r[1], r[2], r[3], r[4], r[5], r[6]];
                decode_residue(roi, &delta, self.cfg.refine.diag, self.cfg.refine.frame).with_confidence(conf[i])
            })
            .collect())
    }
}
