use crate::geometry::{Point3, Roi};

/// Per-point auxiliary labels. Offsets and parts are zero for background
/// points and must be ignored there.
#[derive(Debug, Clone, PartialEq)]
pub struct AuxTargets {
    pub foreground: Vec<bool>,
    /// `gt center − point`, LiDAR frame.
    pub offsets: Vec<Point3>,
    /// Canonical coordinates ÷ size + 0.5, clamped to `[0, 1]`.
    pub parts: Vec<Point3>,
    pub num_foreground: usize,
}

fn dist2(a: Point3, b: Point3) -> f64 {
    (0..3).map(|i| (a[i] - b[i]).powi(2)).sum()
}

/// Labels each point by the containing gt box with the nearest center;
/// ties go to the lower box index.
pub fn make_aux_targets(points: &[Point3], gts: &[Roi]) -> AuxTargets {
    let mut t = AuxTargets {
        foreground: vec![false; points.len()],
        offsets: vec![[0.0; 3]; points.len()],
        parts: vec![[0.0; 3]; points.len()],
        num_foreground: 0,
    };
    for (k, &p) in points.iter().enumerate() {
        let owner =
            gts.iter().filter(|g| g.contains(p, [0.0; 3])).min_by(|a, b| dist2(a.center, p).total_cmp(&dist2(b.center, p)));
        if let Some(g) = owner {
            let q = g.to_canonical(p);
            t.foreground[k] = true;
            t.offsets[k] = [g.center[0] - p[0], g.center[1] - p[1], g.center[2] - p[2]];
            t.parts[k] = [0, 1, 2].map(|a| (q[a] / g.size[a] + 0.5).clamp(0.0, 1.0));
            t.num_foreground += 1;
        }
    }
    t
}
