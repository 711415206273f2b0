use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{GeometryError, Roi};

type P2 = [f64; 2];

/// Which overlap the evaluation uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IouMode {
    #[default]
    Full3d,
    Bev,
}

impl FromStr for IouMode {
    type Err = GeometryError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "3d" | "full3d" => Ok(IouMode::Full3d),
            "bev" => Ok(IouMode::Bev),
            other => Err(GeometryError::Contract(format!("unknown IoU mode {other:?}"))),
        }
    }
}

/// Shoelace area of a simple polygon (positive when counter-clockwise).
pub fn polygon_area(poly: &[P2]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let twice: f64 = (0..n)
        .map(|i| {
            let (a, b) = (poly[i], poly[(i + 1) % n]);
            a[0] * b[1] - b[0] * a[1]
        })
        .sum();
    twice / 2.0
}

fn cross(o: P2, a: P2, b: P2) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Sutherland–Hodgman: clips `subject` by the convex counter-clockwise `clip`.
fn clip_polygon(subject: &[P2], clip: &[P2]) -> Vec<P2> {
    let mut output = subject.to_vec();
    for i in 0..clip.len() {
        if output.is_empty() {
            break;
        }
        let (e0, e1) = (clip[i], clip[(i + 1) % clip.len()]);
        let input = std::mem::take(&mut output);
        for j in 0..input.len() {
            let cur = input[j];
            let prev = input[(j + input.len() - 1) % input.len()];
            let (dc, dp) = (cross(e0, e1, cur), cross(e0, e1, prev));
            let (cur_in, prev_in) = (dc >= 0.0, dp >= 0.0);
            if cur_in != prev_in {
                let t = dp / (dp - dc);
                output.push([prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])]);
            }
            if cur_in {
                output.push(cur);
            }
        }
    }
    output
}

fn bev_intersection(a: &Roi, b: &Roi) -> f64 {
    polygon_area(&clip_polygon(&a.bev_corners(), &b.bev_corners())).max(0.0)
}

fn vertical_overlap(a: &Roi, b: &Roi) -> f64 {
    let top = (a.center[2] + a.size[2] / 2.0).min(b.center[2] + b.size[2] / 2.0);
    let bottom = (a.center[2] - a.size[2] / 2.0).max(b.center[2] - b.size[2] / 2.0);
    (top - bottom).max(0.0)
}

fn check(a: &Roi) -> Result<(), GeometryError> {
    if a.size.iter().any(|s| !(*s > 0.0)) {
        return Err(GeometryError::Contract(format!("degenerate box with size {:?}", a.size)));
    }
    Ok(())
}

/// Rotated 3-D IoU: clipped BEV overlap times vertical overlap over the
/// union of volumes.
pub fn iou_3d(a: &Roi, b: &Roi) -> Result<f64, GeometryError> {
    check(a)?;
    check(b)?;
    let h = vertical_overlap(a, b);
    if h <= 0.0 {
        return Ok(0.0);
    }
    let inter = bev_intersection(a, b) * h;
    let union = a.volume() + b.volume() - inter;
    Ok((inter / union).clamp(0.0, 1.0))
}

/// Rotated bird's-eye-view IoU of the footprints.
pub fn bev_iou(a: &Roi, b: &Roi) -> Result<f64, GeometryError> {
    check(a)?;
    check(b)?;
    let inter = bev_intersection(a, b);
    let union = a.size[0] * a.size[1] + b.size[0] * b.size[1] - inter;
    Ok((inter / union).clamp(0.0, 1.0))
}

pub fn iou(a: &Roi, b: &Roi, mode: IouMode) -> Result<f64, GeometryError> {
    match mode {
        IouMode::Full3d => iou_3d(a, b),
        IouMode::Bev => bev_iou(a, b),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::RigidMotion;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn roi(c: [f64; 3], s: [f64; 3], yaw: f64) -> Roi {
        Roi::new(c, s, yaw, 0).unwrap()
    }

    #[test]
    fn identical_and_disjoint() {
        let a = roi([1.0, 2.0, 0.5], [4.0, 1.8, 1.6], 0.7);
        assert!((iou_3d(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let b = roi([20.0, 2.0, 0.5], [4.0, 1.8, 1.6], 0.7);
        assert_eq!(iou_3d(&a, &b).unwrap(), 0.0);
        let c = roi([1.0, 2.0, 5.0], [4.0, 1.8, 1.6], 0.7);
        assert_eq!(iou_3d(&a, &c).unwrap(), 0.0);
    }

    #[test]
    fn axis_aligned_half_overlap() {
        let a = roi([0.0; 3], [2.0, 2.0, 2.0], 0.0);
        let b = roi([1.0, 0.0, 0.0], [2.0, 2.0, 2.0], 0.0);
        assert!((iou_3d(&a, &b).unwrap() - 4.0 / 12.0).abs() < 1e-12);
    }

    #[test]
    fn rotated_unit_cube_overlap_is_octagon() {
        // Square ∩ square rotated by π/4: a regular octagon of area 2(√2 - 1).
        let a = roi([0.0; 3], [1.0; 3], 0.0);
        let b = roi([0.0; 3], [1.0; 3], PI / 4.0);
        let inter = 2.0 * (2f64.sqrt() - 1.0);
        let want = inter / (2.0 - inter);
        assert!((iou_3d(&a, &b).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn degenerate_is_contract_error() {
        let mut a = roi([0.0; 3], [1.0; 3], 0.0);
        a.size[1] = 0.0;
        let b = roi([0.0; 3], [1.0; 3], 0.0);
        assert!(iou_3d(&a, &b).is_err());
    }

    fn arb_roi() -> impl Strategy<Value = Roi> {
        (prop::array::uniform3(-3.0f64..3.0), prop::array::uniform3(0.3f64..5.0), -PI..PI).prop_map(|(c, s, y)| roi(c, s, y))
    }

    proptest! {
        #[test]
        fn symmetric_and_bounded(a in arb_roi(), b in arb_roi()) {
            let (x, y) = (iou_3d(&a, &b).unwrap(), iou_3d(&b, &a).unwrap());
            prop_assert!((x - y).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&x));
            prop_assert!((iou_3d(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn invariant_under_joint_rotation(a in arb_roi(), b in arb_roi(), yaw in -PI..PI) {
            let m = RigidMotion { yaw, translation: [0.0; 3] };
            let before = iou_3d(&a, &b).unwrap();
            let after = iou_3d(&m.apply_roi(&a), &m.apply_roi(&b)).unwrap();
            prop_assert!((before - after).abs() < 1e-9);
        }
    }
}
