use super::{AuxPrediction, RefineConfig, RefineTargets};
use crate::tensor::nn::Ctx;
use crate::tensor::tape::{bce_value, focal_value, smooth_l1_value};
use crate::tensor::{Result, Tensor, TensorError, Var, PROB_CLAMP};
use crate::voxel::AuxTargets;

/// Focal loss of one probability against a (possibly soft) target.
pub fn focal_loss(p: f64, target: f64, alpha: f64, gamma: f64) -> f64 {
    focal_value(p, target, alpha, gamma)
}

/// Smallest focal loss any probability attains against `target`. Positive
/// for soft targets, so a refine loss cannot fall below the mean of this
/// over its ROIs.
pub fn focal_floor(target: f64, alpha: f64, gamma: f64) -> f64 {
    // The loss is unimodal in p; golden-section search on the clamp range.
    let f = |p: f64| focal_value(p, target, alpha, gamma);
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let (mut lo, mut hi) = (PROB_CLAMP, 1.0 - PROB_CLAMP);
    for _ in 0..100 {
        let (a, b) = (hi - r * (hi - lo), lo + r * (hi - lo));
        if f(a) <= f(b) {
            hi = b;
        } else {
            lo = a;
        }
    }
    f(0.5 * (lo + hi)).min(f(PROB_CLAMP)).min(f(1.0 - PROB_CLAMP))
}

/// Mean smooth-L1 over elements.
pub fn smooth_l1(pred: &[f64], target: &[f64], delta: f64) -> f64 {
    assert_eq!(pred.len(), target.len(), "smooth_l1 shapes differ");
    pred.iter().zip(target).map(|(p, t)| smooth_l1_value(p - t, delta)).sum::<f64>() / pred.len() as f64
}

/// Mean binary cross-entropy over elements.
pub fn bce(pred: &[f64], target: &[f64]) -> f64 {
    assert_eq!(pred.len(), target.len(), "bce shapes differ");
    pred.iter().zip(target).map(|(&p, &t)| bce_value(p, t)).sum::<f64>() / pred.len() as f64
}

fn entropy(t: f64) -> f64 {
    let h = |x: f64| if x > 0.0 { -x * x.ln() } else { 0.0 };
    h(t) + h(1.0 - t)
}

/// `(1/M) Σ_r [focal(c_r, c_r*) + gate_r · smooth_l1(δ_r, δ_r*)]` with
/// `confidence: [M, 1]` probabilities and `residues: [M, 7]`.
pub fn refine_loss(ctx: &mut Ctx, confidence: Var, residues: Var, targets: &RefineTargets, cfg: &RefineConfig) -> Result<Var> {
    let m = targets.confidence.len();
    if m == 0 {
        return Err(TensorError::Contract("refine loss over zero ROIs".into()));
    }
    let mf = m as f64;
    let focal = ctx.tape.focal_elems(confidence, targets.confidence.clone(), cfg.focal_alpha, cfg.focal_gamma)?;
    let cls = ctx.tape.weighted_sum(focal, vec![1.0 / mf; m])?;
    let flat: Vec<f64> = targets.residues.iter().flatten().copied().collect();
    let huber = ctx.tape.smooth_l1_elems(residues, flat, cfg.huber_delta)?;
    let gates: Vec<f64> =
        targets.regress.iter().flat_map(|&g| std::iter::repeat_n(if g { 1.0 / (7.0 * mf) } else { 0.0 }, 7)).collect();
    let reg = ctx.tape.weighted_sum(huber, gates)?;
    ctx.tape.add(cls, reg)
}

/// Point-wise auxiliary loss normalized by the foreground count: focal on
/// every point's foreground probability, plus smooth-L1 on offsets and
/// cross-entropy on part locations for foreground points. The part term
/// is taken relative to the target entropy so a perfect prediction scores 0;
/// its gradient is plain BCE. Zero when there is no foreground.
pub fn aux_loss(ctx: &mut Ctx, pred: &AuxPrediction, targets: &AuxTargets, cfg: &RefineConfig) -> Result<Var> {
    let n = targets.foreground.len();
    if ctx.tape.shape(pred.foreground)[0] != n {
        return Err(TensorError::Contract("one aux prediction per interpreted point".into()));
    }
    if targets.num_foreground == 0 {
        return Ok(ctx.tape.constant(Tensor::scalar(0.0)));
    }
    let inv = 1.0 / targets.num_foreground as f64;
    let fg: Vec<f64> = targets.foreground.iter().map(|&f| if f { 1.0 } else { 0.0 }).collect();
    let focal = ctx.tape.focal_elems(pred.foreground, fg.clone(), cfg.focal_alpha, cfg.focal_gamma)?;
    let cls = ctx.tape.weighted_sum(focal, vec![inv; n])?;

    let per_comp: Vec<f64> = fg.iter().flat_map(|&f| std::iter::repeat_n(f * inv / 3.0, 3)).collect();
    let off_t: Vec<f64> = targets.offsets.iter().flatten().copied().collect();
    let off = ctx.tape.smooth_l1_elems(pred.offsets, off_t, cfg.huber_delta)?;
    let off = ctx.tape.weighted_sum(off, per_comp.clone())?;

    let part_t: Vec<f64> = targets.parts.iter().flatten().copied().collect();
    let floor: f64 = part_t.iter().zip(&per_comp).map(|(&t, &w)| w * entropy(t)).sum();
    let part = ctx.tape.bce_elems(pred.parts, part_t)?;
    let part = ctx.tape.weighted_sum(part, per_comp)?;
    let floor = ctx.tape.constant(Tensor::scalar(floor));
    let part = ctx.tape.sub(part, floor)?;

    let reg = ctx.tape.add(off, part)?;
    ctx.tape.add(cls, reg)
}

/// Sum of the enabled terms; an empty list is the constant 0.
pub fn total_loss(ctx: &mut Ctx, terms: &[Var]) -> Result<Var> {
    let mut acc = ctx.tape.constant(Tensor::scalar(0.0));
    for &t in terms {
        acc = ctx.tape.add(acc, t)?;
    }
    Ok(acc)
}
