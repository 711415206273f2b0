//! Evaluation: refine jittered proposals, suppress duplicates, and score
//! with 40-point interpolated average precision, mean IoU against the
//! matched ground truth, and a confidence calibration table.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::Serialize;

use super::jitter::jitter_proposals;
use super::mix;
use super::scenes::CLASS_NAMES;
use crate::config::Config;
use crate::geometry::{iou, iou_3d, nms, IouMode, Roi};
use crate::model::Model;
use crate::tensor::nn::ParamStore;
use crate::voxel::scene::Scene;
use crate::voxel::voxelize;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    /// Match threshold for class 0.
    pub iou_car: f64,
    /// Match threshold for every other class.
    pub iou_small: f64,
    pub iou_mode: IouMode,
    pub nms_threshold: f64,
    pub max_rois: usize,
    pub proposal_seed: u64,
    pub calibration_bins: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            iou_car: 0.7,
            iou_small: 0.5,
            iou_mode: IouMode::Full3d,
            nms_threshold: 0.1,
            max_rois: 100,
            proposal_seed: 0x5EED_E7A1,
            calibration_bins: 10,
        }
    }
}

impl EvalConfig {
    pub fn threshold(&self, cls: usize) -> f64 {
        if cls == 0 {
            self.iou_car
        } else {
            self.iou_small
        }
    }
}

/// Recall positions of the interpolated AP.
pub const RECALL_POSITIONS: usize = 40;

/// `(recall, precision)` after each detection, with detections ordered by
/// descending confidence (ties by input order). A detection is a true
/// positive when its best still-unmatched gt in the same scene reaches
/// `threshold`. Entries are `(scene, box)`.
pub fn precision_recall(dets: &[(usize, Roi)], gts: &[Vec<Roi>], threshold: f64, mode: IouMode) -> Result<Vec<(usize, usize)>> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].1.confidence.total_cmp(&dets[a].1.confidence).then(a.cmp(&b)));
    let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut tp = 0;
    let mut curve = Vec::with_capacity(dets.len());
    for (rank, &i) in order.iter().enumerate() {
        let (scene, det) = &dets[i];
        let cands = gts.get(*scene).ok_or_else(|| Error::Contract(format!("detection refers to scene {scene}")))?;
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in cands.iter().enumerate() {
            if used[*scene][j] {
                continue;
            }
            let v = iou(det, g, mode)?;
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((j, v));
            }
        }
        if let Some((j, v)) = best {
            if v >= threshold {
                used[*scene][j] = true;
                tp += 1;
            }
        }
        curve.push((tp, rank + 1));
    }
    Ok(curve)
}

/// Mean over `k = 1..=40` of the best precision at recall `≥ k/40`, in
/// percent. `curve` holds `(true positives, detections)` prefixes; the
/// recall comparison is done in integers.
pub fn interpolated_ap40(curve: &[(usize, usize)], num_gt: usize) -> f64 {
    let mut sum = 0.0;
    for k in 1..=RECALL_POSITIONS {
        let best = curve
            .iter()
            .filter(|(tp, _)| tp * RECALL_POSITIONS >= k * num_gt)
            .map(|&(tp, n)| tp as f64 / n as f64)
            .fold(0.0, f64::max);
        sum += best;
    }
    100.0 * sum / RECALL_POSITIONS as f64
}

/// AP in `[0, 100]`, or `None` when there is no ground truth.
pub fn average_precision(dets: &[(usize, Roi)], gts: &[Vec<Roi>], threshold: f64, mode: IouMode) -> Result<Option<f64>> {
    let num_gt: usize = gts.iter().map(Vec::len).sum();
    if num_gt == 0 {
        return Ok(None);
    }
    let curve = precision_recall(dets, gts, threshold, mode)?;
    Ok(Some(interpolated_ap40(&curve, num_gt)))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CalibrationBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub mean_confidence: f64,
    /// Mean best 3-D IoU with any gt.
    pub mean_iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    /// Per-class AP; `None` for classes without ground truth.
    pub ap: BTreeMap<String, Option<f64>>,
    /// Over proposals overlapping some gt: mean IoU of the refined box with
    /// the proposal's matched gt.
    pub mean_iou_refined: f64,
    /// Same proposals, unrefined.
    pub mean_iou_proposal: f64,
    pub matched: usize,
    pub calibration: Vec<CalibrationBin>,
}

impl EvalReport {
    pub fn iou_gain(&self) -> f64 {
        self.mean_iou_refined - self.mean_iou_proposal
    }
}

struct SceneResult {
    detections: Vec<Roi>,
    /// `(proposal IoU, refined IoU)` per matched proposal.
    pairs: Vec<(f64, f64)>,
    /// `(confidence, best IoU)` per refined box before suppression.
    scored: Vec<(f64, f64)>,
}

fn best_iou(roi: &Roi, gts: &[Roi]) -> Result<Option<(usize, f64)>> {
    let mut best: Option<(usize, f64)> = None;
    for (j, g) in gts.iter().enumerate() {
        let v = iou_3d(roi, g)?;
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((j, v));
        }
    }
    Ok(best)
}

fn eval_scene(model: &Model, store: &ParamStore, scene: &Scene, idx: usize, cfg: &Config) -> Result<SceneResult> {
    let gts = scene.gt_rois()?;
    let mut proposals = jitter_proposals(&gts, &cfg.jitter, mix(cfg.eval.proposal_seed, idx as u64));
    proposals.truncate(cfg.eval.max_rois);
    let occ = voxelize(&scene.points, &cfg.model.grid);
    let keys: Vec<u64> = (0..proposals.len() as u64).collect();
    let refined = model.predict(store, &occ, &proposals, &keys, mix(cfg.eval.proposal_seed, !(idx as u64)))?;
    let mut pairs = Vec::new();
    let mut scored = Vec::with_capacity(refined.len());
    for (p, r) in proposals.iter().zip(&refined) {
        if let Some((j, v)) = best_iou(p, &gts)? {
            if v > 0.0 {
                pairs.push((v, iou_3d(r, &gts[j])?));
            }
        }
        scored.push((r.confidence, best_iou(r, &gts)?.map_or(0.0, |b| b.1)));
    }
    let mut detections = Vec::new();
    for cls in 0..CLASS_NAMES.len() {
        let of_class: Vec<Roi> = refined.iter().filter(|r| r.cls == cls).copied().collect();
        detections.extend(nms(&of_class, cfg.eval.nms_threshold, cfg.eval.max_rois)?);
    }
    Ok(SceneResult { detections, pairs, scored })
}

fn calibration(scored: &[(f64, f64)], bins: usize) -> Vec<CalibrationBin> {
    (0..bins)
        .map(|b| {
            let lo = b as f64 / bins as f64;
            let hi = (b + 1) as f64 / bins as f64;
            let inside: Vec<&(f64, f64)> =
                scored.iter().filter(|(c, _)| *c >= lo && (*c < hi || (b + 1 == bins && *c <= hi))).collect();
            let n = inside.len();
            let mean = |f: fn(&(f64, f64)) -> f64| if n == 0 { 0.0 } else { inside.iter().map(|x| f(x)).sum::<f64>() / n as f64 };
            CalibrationBin { lo, hi, count: n, mean_confidence: mean(|x| x.0), mean_iou: mean(|x| x.1) }
        })
        .collect()
}

/// Deterministic in the parameters, scenes and config.
pub fn evaluate(model: &Model, store: &ParamStore, scenes: &[Scene], cfg: &Config) -> Result<EvalReport> {
    cfg.jitter.validate()?;
    let results: Vec<SceneResult> =
        scenes.par_iter().enumerate().map(|(i, s)| eval_scene(model, store, s, i, cfg)).collect::<Result<_>>()?;
    let gts: Vec<Vec<Roi>> = scenes.iter().map(|s| s.gt_rois()).collect::<std::result::Result<_, _>>()?;
    let mut ap = BTreeMap::new();
    for (cls, name) in CLASS_NAMES.iter().enumerate() {
        let dets: Vec<(usize, Roi)> = results
            .iter()
            .enumerate()
            .flat_map(|(i, r)| r.detections.iter().filter(|d| d.cls == cls).map(move |d| (i, *d)))
            .collect();
        let class_gts: Vec<Vec<Roi>> = gts.iter().map(|g| g.iter().filter(|b| b.cls == cls).copied().collect()).collect();
        ap.insert(name.to_string(), average_precision(&dets, &class_gts, cfg.eval.threshold(cls), cfg.eval.iou_mode)?);
    }
    let pairs: Vec<(f64, f64)> = results.iter().flat_map(|r| r.pairs.iter().copied()).collect();
    let n = pairs.len().max(1) as f64;
    let scored: Vec<(f64, f64)> = results.iter().flat_map(|r| r.scored.iter().copied()).collect();
    Ok(EvalReport {
        ap,
        mean_iou_proposal: pairs.iter().map(|p| p.0).sum::<f64>() / n,
        mean_iou_refined: pairs.iter().map(|p| p.1).sum::<f64>() / n,
        matched: pairs.len(),
        calibration: calibration(&scored, cfg.eval.calibration_bins.max(1)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn car(x: f64, conf: f64) -> Roi {
        Roi::new([x, 0.0, 0.8], [4.0, 1.8, 1.6], 0.0, 0).unwrap().with_confidence(conf)
    }

    #[test]
    fn perfect_detections_score_100() {
        let gts = vec![vec![car(0.0, 1.0), car(10.0, 1.0)], vec![car(5.0, 1.0)]];
        let dets: Vec<(usize, Roi)> = gts.iter().enumerate().flat_map(|(i, g)| g.iter().map(move |b| (i, *b))).collect();
        assert_eq!(average_precision(&dets, &gts, 0.7, IouMode::Full3d).unwrap(), Some(100.0));
    }

    #[test]
    fn no_detections_score_0_and_no_gt_is_absent() {
        let gts = vec![vec![car(0.0, 1.0)]];
        assert_eq!(average_precision(&[], &gts, 0.7, IouMode::Full3d).unwrap(), Some(0.0));
        assert_eq!(average_precision(&[(0, car(0.0, 0.9))], &[vec![]], 0.7, IouMode::Full3d).unwrap(), None);
    }

    #[test]
    fn four_detections_three_gt_table() {
        // TP, FP, TP, TP by descending confidence: precision 1, 1/2, 2/3, 3/4
        // at recall 1/3, 1/3, 2/3, 1. Positions 1..=13 see 1; 14..=40 see 3/4.
        let gts = vec![vec![car(0.0, 1.0), car(10.0, 1.0), car(20.0, 1.0)]];
        let dets = vec![(0, car(10.0, 0.7)), (0, car(0.0, 0.9)), (0, car(20.0, 0.6)), (0, car(40.0, 0.8))];
        let curve = precision_recall(&dets, &gts, 0.7, IouMode::Full3d).unwrap();
        assert_eq!(curve, vec![(1, 1), (1, 2), (2, 3), (3, 4)]);
        let ap = average_precision(&dets, &gts, 0.7, IouMode::Full3d).unwrap().unwrap();
        assert_eq!(ap, 100.0 * (13.0 + 27.0 * 0.75) / 40.0);
    }

    #[test]
    fn duplicate_detection_is_false_positive() {
        let gts = vec![vec![car(0.0, 1.0)]];
        let dets = vec![(0, car(0.0, 0.9)), (0, car(0.1, 0.8))];
        assert_eq!(precision_recall(&dets, &gts, 0.7, IouMode::Full3d).unwrap(), vec![(1, 1), (1, 2)]);
    }

    #[test]
    fn monotone_confidence_transform_keeps_ap() {
        let gts = vec![vec![car(0.0, 1.0), car(10.0, 1.0), car(20.0, 1.0)]];
        let dets = vec![(0, car(10.3, 0.7)), (0, car(0.0, 0.2)), (0, car(20.9, 0.6)), (0, car(40.0, 0.8))];
        let warped: Vec<(usize, Roi)> = dets.iter().map(|(s, d)| (*s, d.with_confidence((3.0 * d.confidence).exp()))).collect();
        let a = average_precision(&dets, &gts, 0.7, IouMode::Full3d).unwrap();
        assert_eq!(a, average_precision(&warped, &gts, 0.7, IouMode::Full3d).unwrap());
    }

    #[test]
    fn calibration_bins_partition_scores() {
        let scored = [(0.05, 0.1), (0.95, 0.9), (1.0, 0.8), (0.5, 0.4)];
        let table = calibration(&scored, 10);
        assert_eq!(table.iter().map(|b| b.count).sum::<usize>(), 4);
        assert_eq!(table[9].count, 2);
        assert!((table[9].mean_iou - 0.85).abs() < 1e-12);
    }
}
