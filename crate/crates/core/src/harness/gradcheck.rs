//! Finite-difference verification of the whole network on a fixed tiny
//! instance, reported per parameter group.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::jitter::sample_training_rois;
use super::mix;
use super::scenes::gen_scene;
use crate::config::Config;
use crate::model::Model;
use crate::tensor::gradcheck::{gradcheck, GradReport, GradcheckOptions};
use crate::tensor::nn::{Ctx, Mlp, NormKind, NormLayer, ParamStore};
use crate::tensor::{Segments, Tensor};
use crate::voxel::voxelize;
use crate::{Error, Result};

/// Largest accepted relative error in any group.
pub const GRADCHECK_TOL: f64 = 1e-4;

/// The fixed instance: the tiny preset with one scene and two ROIs.
pub fn gradcheck_config() -> Config {
    let mut cfg = Config::tiny();
    cfg.train.rois_per_scene = 2;
    cfg
}

/// Group `tensor`: batch norm, segment softmax/sum/max and the loss
/// primitives on a standalone fixture.
fn tensor_fixture(opts: &GradcheckOptions) -> Result<GradReport> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mlp = Mlp::new(&mut store, "tensor.mlp", &[3, 6, 4], &mut rng);
    let norm = NormLayer::new(&mut store, "tensor.bn", NormKind::Batch, 3);
    let segs = Arc::new(Segments::from_counts(&[2, 3]));
    let loss = |ctx: &mut Ctx| {
        let x = ctx.tape.constant(Tensor::from_rows(&[
            vec![0.3, -1.2, 0.8],
            vec![1.1, 0.4, -0.5],
            vec![-0.7, 0.9, 0.2],
            vec![0.5, 0.5, -1.5],
            vec![1.4, -0.3, 0.6],
        ])?);
        // Normalizing before the MLP keeps every bias gradient nonzero.
        let x = norm.forward(ctx, x)?;
        let h = mlp.forward(ctx, x)?;
        let w = ctx.tape.segment_softmax(h, segs.clone())?;
        let wh = ctx.tape.mul(w, h)?;
        let pooled = ctx.tape.segment_sum(wh, segs.clone())?;
        let peak = ctx.tape.segment_max(h, &segs)?;
        let both = ctx.tape.add(pooled, peak)?;
        let p = ctx.tape.sigmoid(both)?;
        let focal = ctx.tape.focal_elems(p, vec![1.0, 0.0, 0.4, 0.9, 0.0, 1.0, 0.2, 0.7], 0.25, 2.0)?;
        let reg = ctx.tape.smooth_l1_elems(both, vec![0.5; 8], 1.0)?;
        let a = ctx.tape.sum(focal)?;
        let b = ctx.tape.sum(reg)?;
        ctx.tape.add(a, b)
    };
    Ok(gradcheck(&mut store, loss, opts)?)
}

/// Checks every parameter group of the model built from `cfg` on one
/// generated scene with `cfg.train.rois_per_scene` jittered ROIs, plus the
/// standalone `tensor` fixture.
pub fn run_gradcheck(cfg: &Config, opts: &GradcheckOptions) -> Result<GradReport> {
    let scene = gen_scene(&cfg.scene, cfg.seed)?;
    let gts = scene.gt_rois()?;
    let rois = sample_training_rois(&gts, &cfg.jitter, cfg.train.rois_per_scene, cfg.train.max_rois, mix(cfg.seed, 1));
    if rois.is_empty() {
        return Err(Error::Contract("gradient check instance has no ROIs".into()));
    }
    let keys: Vec<u64> = (0..rois.len() as u64).collect();
    let occ = voxelize(&scene.points, &cfg.model.grid);
    let mut store = ParamStore::new();
    let model = Model::new(&mut store, cfg.model.clone(), cfg.seed)?;
    let loss = |ctx: &mut Ctx| {
        let (terms, _) = model.loss(ctx, &occ, &rois, &keys, &gts, mix(cfg.seed, 2)).map_err(to_tensor_err)?;
        Ok(terms.total)
    };
    let mut report = gradcheck(&mut store, loss, opts)?;
    report.groups.extend(tensor_fixture(opts)?.groups);
    Ok(report)
}

fn to_tensor_err(e: Error) -> crate::tensor::TensorError {
    match e {
        Error::Tensor(t) => t,
        other => crate::tensor::TensorError::Contract(other.to_string()),
    }
}
