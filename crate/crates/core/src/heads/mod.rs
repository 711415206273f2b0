//! Refinement targets, box residues, detection heads, and losses.

mod head;
mod loss;

pub use head::{AuxHead, AuxPrediction, DetectionHead, HeadOutput};
pub use loss::{aux_loss, bce, focal_floor, focal_loss, refine_loss, smooth_l1, total_loss};

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::geometry::{iou_3d, wrap_angle, GeometryError, Roi};

pub type Residue = [f64; 7];

/// How the planar translation residue is normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DiagMode {
    /// `√(dx_r² + dy_r²)`, the diagonal of the ROI base.
    #[default]
    Base,
    /// `√(x_r² + y_r²)`, the ROI center's distance from the sensor.
    Center,
}

/// Axes of the planar translation residue.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResidueFrame {
    /// LiDAR-frame x and y offsets.
    Lidar,
    /// Offsets rotated into the ROI's canonical frame, so the residue is
    /// invariant to a global yaw like the ROI features that predict it.
    #[default]
    Canonical,
}

/// What the regression gate compares against `χ_reg`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GateMode {
    #[default]
    Iou,
    Normalized,
}

impl FromStr for DiagMode {
    type Err = GeometryError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "base" => Ok(DiagMode::Base),
            "center" => Ok(DiagMode::Center),
            other => Err(GeometryError::Contract(format!("unknown diagonal mode {other:?}"))),
        }
    }
}

impl FromStr for ResidueFrame {
    type Err = GeometryError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "lidar" => Ok(ResidueFrame::Lidar),
            "canonical" => Ok(ResidueFrame::Canonical),
            other => Err(GeometryError::Contract(format!("unknown residue frame {other:?}"))),
        }
    }
}

impl FromStr for GateMode {
    type Err = GeometryError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "iou" => Ok(GateMode::Iou),
            "normalized" => Ok(GateMode::Normalized),
            other => Err(GeometryError::Contract(format!("unknown gate mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefineConfig {
    pub chi_h: f64,
    pub chi_l: f64,
    pub chi_reg: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub huber_delta: f64,
    pub diag: DiagMode,
    pub frame: ResidueFrame,
    pub gate: GateMode,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig {
            chi_h: 0.75,
            chi_l: 0.25,
            chi_reg: 0.55,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            huber_delta: 1.0,
            diag: DiagMode::Base,
            frame: ResidueFrame::Canonical,
            gate: GateMode::Iou,
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(0.0 <= self.chi_l && self.chi_l < self.chi_reg && self.chi_reg <= self.chi_h && self.chi_h <= 1.0) {
            return Err(GeometryError::Contract("need 0 ≤ χ_L < χ_reg ≤ χ_H ≤ 1".into()));
        }
        if !(self.huber_delta > 0.0) || !(self.focal_gamma >= 0.0) || !(0.0..=1.0).contains(&self.focal_alpha) {
            return Err(GeometryError::Contract("invalid loss hyperparameters".into()));
        }
        Ok(())
    }
}

/// Confidence target: 0 below `χ_L`, 1 above `χ_H`, linear between.
pub fn normalized_iou(iou: f64, cfg: &RefineConfig) -> f64 {
    ((iou - cfg.chi_l) / (cfg.chi_h - cfg.chi_l)).clamp(0.0, 1.0)
}

fn diag(roi: &Roi, mode: DiagMode) -> f64 {
    match mode {
        DiagMode::Base => roi.size[0].hypot(roi.size[1]),
        DiagMode::Center => roi.center[0].hypot(roi.center[1]),
    }
}

/// Rotates a planar vector by `angle`.
fn rotate(v: [f64; 2], angle: f64) -> [f64; 2] {
    let (sin, cos) = angle.sin_cos();
    [cos * v[0] - sin * v[1], sin * v[0] + cos * v[1]]
}

/// Normalized offset of `gt` relative to `roi`.
pub fn encode_residue(roi: &Roi, gt: &Roi, mode: DiagMode, frame: ResidueFrame) -> Result<Residue, GeometryError> {
    if gt.size.iter().any(|s| !(*s > 0.0)) {
        return Err(GeometryError::Contract(format!("gt size {:?} not positive", gt.size)));
    }
    let d = diag(roi, mode);
    if !(d > 0.0) {
        return Err(GeometryError::Contract("zero translation normalizer".into()));
    }
    let mut t = [gt.center[0] - roi.center[0], gt.center[1] - roi.center[1]];
    if frame == ResidueFrame::Canonical {
        t = rotate(t, -roi.yaw);
    }
    Ok([
        t[0] / d,
        t[1] / d,
        (gt.center[2] - roi.center[2]) / roi.size[2],
        (gt.size[0] / roi.size[0]).ln(),
        (gt.size[1] / roi.size[1]).ln(),
        (gt.size[2] / roi.size[2]).ln(),
        wrap_angle(gt.yaw - roi.yaw),
    ])
}

/// Inverse of [`encode_residue`]; class and confidence come from `roi`.
pub fn decode_residue(roi: &Roi, delta: &Residue, mode: DiagMode, frame: ResidueFrame) -> Roi {
    let d = diag(roi, mode);
    let mut t = [delta[0] * d, delta[1] * d];
    if frame == ResidueFrame::Canonical {
        t = rotate(t, roi.yaw);
    }
    Roi {
        center: [roi.center[0] + t[0], roi.center[1] + t[1], roi.center[2] + delta[2] * roi.size[2]],
        size: [roi.size[0] * delta[3].exp(), roi.size[1] * delta[4].exp(), roi.size[2] * delta[5].exp()],
        yaw: wrap_angle(roi.yaw + delta[6]),
        ..*roi
    }
}

/// Per-ROI training targets from max-IoU matching (ties to the lower gt
/// index). Unmatched ROIs get confidence 0 and no regression.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RefineTargets {
    pub matched: Vec<Option<usize>>,
    pub iou: Vec<f64>,
    pub confidence: Vec<f64>,
    pub residues: Vec<Residue>,
    pub regress: Vec<bool>,
}

pub fn make_refine_targets(rois: &[Roi], gts: &[Roi], cfg: &RefineConfig) -> Result<RefineTargets, GeometryError> {
    let mut t = RefineTargets::default();
    for roi in rois {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            let v = iou_3d(roi, gt)?;
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((g, v));
            }
        }
        let (matched, iou) = match best {
            Some((g, v)) => (Some(g), v),
            None => (None, 0.0),
        };
        let c = normalized_iou(iou, cfg);
        let gate_value = match cfg.gate {
            GateMode::Iou => iou,
            GateMode::Normalized => c,
        };
        let residue = match matched {
            Some(g) => encode_residue(roi, &gts[g], cfg.diag, cfg.frame)?,
            None => [0.0; 7],
        };
        t.matched.push(matched);
        t.iou.push(iou);
        t.confidence.push(c);
        t.residues.push(residue);
        t.regress.push(matched.is_some() && gate_value >= cfg.chi_reg);
    }
    Ok(t)
}
