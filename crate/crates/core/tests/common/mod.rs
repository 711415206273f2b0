//! Independent oracles shared by the integration and acceptance targets.
#![allow(dead_code)]

use rand::Rng;
use rfe3d::geometry::{iou_3d, Point3, Roi};

/// Box-local coordinates from first principles: translate, then project
/// onto the heading and its left normal.
pub fn local(p: Point3, roi: &Roi) -> Point3 {
    let (s, c) = roi.yaw.sin_cos();
    let d = [p[0] - roi.center[0], p[1] - roi.center[1], p[2] - roi.center[2]];
    [c * d[0] + s * d[1], -s * d[0] + c * d[1], d[2]]
}

/// Half-space membership: inside all six face planes built from the
/// box's LiDAR-frame vertices.
pub fn inside_half_spaces(p: Point3, roi: &Roi, enlargement: Point3) -> bool {
    let v = roi.vertices_lidar();
    let v0 = v.get(0);
    // Bit 2 is x, bit 1 is y, bit 0 is z.
    [(4usize, 0usize), (2, 1), (1, 2)].iter().all(|&(bit, axis)| {
        let far = v.get(bit);
        let edge = [far[0] - v0[0], far[1] - v0[1], far[2] - v0[2]];
        let len = (edge[0] * edge[0] + edge[1] * edge[1] + edge[2] * edge[2]).sqrt();
        let n = [edge[0] / len, edge[1] / len, edge[2] / len];
        let along = (0..3).map(|k| (p[k] - roi.center[k]) * n[k]).sum::<f64>();
        along.abs() <= (roi.size[axis] + enlargement[axis]) / 2.0
    })
}

/// IoU estimated by sampling `samples` points uniformly inside `a` and
/// counting those inside `b`.
pub fn monte_carlo_iou(a: &Roi, b: &Roi, samples: usize, rng: &mut impl Rng) -> f64 {
    let (s, c) = a.yaw.sin_cos();
    let mut hits = 0usize;
    for _ in 0..samples {
        let q: Point3 = [0, 1, 2].map(|k| (rng.random::<f64>() - 0.5) * a.size[k]);
        let p = [a.center[0] + c * q[0] - s * q[1], a.center[1] + s * q[0] + c * q[1], a.center[2] + q[2]];
        let l = local(p, b);
        if (0..3).all(|k| l[k].abs() <= b.size[k] / 2.0) {
            hits += 1;
        }
    }
    let va = a.size.iter().product::<f64>();
    let vb = b.size.iter().product::<f64>();
    let inter = va * hits as f64 / samples as f64;
    inter / (va + vb - inter)
}

/// Quadratic NMS: repeatedly keep the most confident survivor (lowest
/// index on ties) and drop everything overlapping it above `threshold`.
pub fn naive_nms(rois: &[Roi], threshold: f64, max_keep: usize) -> Vec<usize> {
    let mut alive: Vec<bool> = vec![true; rois.len()];
    let mut keep = Vec::new();
    while keep.len() < max_keep {
        let mut best: Option<usize> = None;
        for i in 0..rois.len() {
            if alive[i] && best.is_none_or(|b| rois[i].confidence > rois[b].confidence) {
                best = Some(i);
            }
        }
        let Some(b) = best else { break };
        keep.push(b);
        for i in 0..rois.len() {
            if alive[i] && iou_3d(&rois[b], &rois[i]).unwrap() > threshold {
                alive[i] = false;
            }
        }
        alive[b] = false;
    }
    keep
}

/// Two boxes with arbitrary yaws, the second centered within the first's
/// extents so the pair usually overlaps.
pub fn overlapping_pair(rng: &mut impl Rng) -> (Roi, Roi) {
    let size = |rng: &mut dyn rand::RngCore| [rng.random_range(0.5..5.0), rng.random_range(0.5..3.0), rng.random_range(0.5..2.5)];
    let a = Roi::new(
        [rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0), rng.random_range(-1.0..1.0)],
        size(rng),
        rng.random_range(-3.1..3.1),
        0,
    )
    .unwrap();
    let shift: Point3 = [0, 1, 2].map(|k| rng.random_range(-0.6..0.6) * a.size[k]);
    let b = Roi::new(
        [a.center[0] + shift[0], a.center[1] + shift[1], a.center[2] + shift[2]],
        size(rng),
        rng.random_range(-3.1..3.1),
        0,
    )
    .unwrap();
    (a, b)
}

/// `n` boxes in a 20 m square with confidences drawn from a small set so
/// ties occur.
pub fn crowded_boxes(n: usize, rng: &mut impl Rng) -> Vec<Roi> {
    (0..n)
        .map(|_| {
            Roi::new(
                [rng.random_range(0.0..20.0), rng.random_range(0.0..20.0), rng.random_range(-0.5..0.5)],
                [rng.random_range(1.0..5.0), rng.random_range(1.0..3.0), rng.random_range(1.0..2.0)],
                rng.random_range(-3.1..3.1),
                0,
            )
            .unwrap()
            .with_confidence(rng.random_range(0..20) as f64 / 20.0)
        })
        .collect()
}

/// Vector attention for one query, written as scalar loops over the raw
/// weights: `Σ_j softmax_j(γ(φ(r) − ψ(f_j) + ζ_j))_c · (α(f_j) + ζ_j)_c`.
pub struct ScalarAttention {
    pub phi: (Vec<Vec<f64>>, Vec<f64>),
    pub psi: (Vec<Vec<f64>>, Vec<f64>),
    pub alpha: (Vec<Vec<f64>>, Vec<f64>),
    pub gamma: Vec<(Vec<Vec<f64>>, Vec<f64>)>,
}

fn affine(layer: &(Vec<Vec<f64>>, Vec<f64>), x: &[f64]) -> Vec<f64> {
    let (w, b) = layer;
    w.iter().zip(b).map(|(row, bias)| row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + bias).collect()
}

impl ScalarAttention {
    /// Output and per-point, per-channel weights.
    pub fn forward(&self, r: &[f64], feats: &[Vec<f64>], zeta: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
        let q = affine(&self.phi, r);
        let logits: Vec<Vec<f64>> = feats
            .iter()
            .zip(zeta)
            .map(|(f, z)| {
                let k = affine(&self.psi, f);
                let mut h: Vec<f64> = (0..q.len()).map(|c| q[c] - k[c] + z[c]).collect();
                for (i, layer) in self.gamma.iter().enumerate() {
                    if i > 0 {
                        h.iter_mut().for_each(|v| *v = v.max(0.0));
                    }
                    h = affine(layer, &h);
                }
                h
            })
            .collect();
        let d = q.len();
        let mut weights = vec![vec![0.0; d]; feats.len()];
        for c in 0..d {
            let m = logits.iter().map(|l| l[c]).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l[c] - m).exp()).sum();
            for (j, l) in logits.iter().enumerate() {
                weights[j][c] = (l[c] - m).exp() / z;
            }
        }
        let mut out = vec![0.0; d];
        for (j, (f, z)) in feats.iter().zip(zeta).enumerate() {
            let v = affine(&self.alpha, f);
            for c in 0..d {
                out[c] += weights[j][c] * (v[c] + z[c]);
            }
        }
        (out, weights)
    }
}
