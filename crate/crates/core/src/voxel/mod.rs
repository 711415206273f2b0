//! Voxel grids, the surrogate multi-scale encoder, voxel-to-point
//! interpretation, and auxiliary point labels.
//!
//! Voxel keys are `[d, h, w]`, i.e. `[z, y, x]` cell indices.

mod aux;
mod encoder;
pub mod scene;

pub use aux::{make_aux_targets, AuxTargets};
pub use encoder::{EncodedScale, Encoder, CHANNELS, NUM_SCALES};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Point3;
use crate::tensor::Tensor;

pub type VoxelKey = [usize; 3];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VoxelError {
    #[error("invalid grid: {0}")]
    Grid(String),
}

/// Point-cloud range and the scale-1 voxel size. Scale `i` (1-based) uses
/// voxels `2^(i-1)` times larger.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub range_min: Point3,
    pub range_max: Point3,
    pub voxel: Point3,
}

impl GridSpec {
    /// Validates that each axis holds a whole number of scale-4 cells, so
    /// every scale tiles the range exactly.
    pub fn new(range_min: Point3, range_max: Point3, voxel: Point3) -> Result<Self, VoxelError> {
        let spec = GridSpec { range_min, range_max, voxel };
        let coarsest = (1usize << (NUM_SCALES - 1)) as f64;
        for a in 0..3 {
            if !(range_max[a] > range_min[a]) || !(voxel[a] > 0.0) {
                return Err(VoxelError::Grid(format!("axis {a}: need max > min and voxel > 0")));
            }
            let cells = (range_max[a] - range_min[a]) / voxel[a];
            let rounded = cells.round();
            if (cells - rounded).abs() > 1e-6 * rounded.max(1.0) || rounded as usize % coarsest as usize != 0 {
                return Err(VoxelError::Grid(format!("axis {a}: extent is {cells} voxels, not a multiple of {coarsest}")));
            }
        }
        Ok(spec)
    }

    pub fn voxel_size(&self, scale: usize) -> Point3 {
        let f = (1usize << (scale - 1)) as f64;
        [self.voxel[0] * f, self.voxel[1] * f, self.voxel[2] * f]
    }

    /// Cell counts per axis as `[d, h, w]`.
    pub fn dims(&self, scale: usize) -> VoxelKey {
        let v = self.voxel_size(scale);
        let n = |a: usize| ((self.range_max[a] - self.range_min[a]) / v[a]).round() as usize;
        [n(2), n(1), n(0)]
    }

    pub fn in_range(&self, p: Point3) -> bool {
        (0..3).all(|a| p[a] >= self.range_min[a] && p[a] < self.range_max[a])
    }

    /// Cell containing `p`, or `None` outside the half-open range.
    pub fn cell_of(&self, p: Point3, scale: usize) -> Option<VoxelKey> {
        if !self.in_range(p) {
            return None;
        }
        let v = self.voxel_size(scale);
        let dims = self.dims(scale);
        let idx = |a: usize, bound: usize| (((p[a] - self.range_min[a]) / v[a]).floor() as usize).min(bound - 1);
        Some([idx(2, dims[0]), idx(1, dims[1]), idx(0, dims[2])])
    }

    /// Cell-center location: `([w, h, d] + 0.5) · Vⁱ + range_min`.
    pub fn cell_center(&self, key: VoxelKey, scale: usize) -> Point3 {
        let v = self.voxel_size(scale);
        let [d, h, w] = key;
        [
            (w as f64 + 0.5) * v[0] + self.range_min[0],
            (h as f64 + 0.5) * v[1] + self.range_min[1],
            (d as f64 + 0.5) * v[2] + self.range_min[2],
        ]
    }
}

/// Occupied scale-1 voxels with raw statistics: mean point offset from the
/// voxel center in voxel units (3) and `min(count / 16, 1)` (1).
#[derive(Debug, Clone, PartialEq)]
pub struct Occupancy {
    /// Sorted, unique.
    pub keys: Vec<VoxelKey>,
    /// `[keys.len(), 4]`.
    pub stats: Tensor,
}

pub const COUNT_NORM: f64 = 16.0;

/// Bins points into scale-1 voxels; out-of-range points are dropped.
pub fn voxelize(points: &[Point3], spec: &GridSpec) -> Occupancy {
    let mut binned: Vec<(VoxelKey, Point3)> = points.iter().filter_map(|&p| spec.cell_of(p, 1).map(|k| (k, p))).collect();
    binned.sort_by_key(|b| b.0);
    let v = spec.voxel_size(1);
    let mut keys = Vec::new();
    let mut stats = Vec::new();
    let mut i = 0;
    while i < binned.len() {
        let key = binned[i].0;
        let mut j = i;
        let mut sum = [0.0; 3];
        while j < binned.len() && binned[j].0 == key {
            for a in 0..3 {
                sum[a] += binned[j].1[a];
            }
            j += 1;
        }
        let n = (j - i) as f64;
        let c = spec.cell_center(key, 1);
        keys.push(key);
        stats.extend((0..3).map(|a| (sum[a] / n - c[a]) / v[a]));
        stats.push((n / COUNT_NORM).min(1.0));
        i = j;
    }
    let n = keys.len();
    Occupancy { keys, stats: Tensor::new(stats, vec![n, 4]).expect("four stats per voxel") }
}

/// Occupied cells of one scale with their feature rows.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseFeatureMap {
    pub scale: usize,
    pub keys: Vec<VoxelKey>,
    /// `[keys.len(), C]`.
    pub features: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointWiseFeature {
    pub position: Point3,
    pub feature: Vec<f64>,
    pub source_scale: usize,
}

/// Cell-center positions of `keys` at `scale`.
pub fn interpret_positions(keys: &[VoxelKey], scale: usize, spec: &GridSpec) -> Vec<Point3> {
    keys.iter().map(|&k| spec.cell_center(k, scale)).collect()
}

/// One point per occupied voxel, located at the cell center.
pub fn interpret(map: &SparseFeatureMap, spec: &GridSpec) -> Vec<PointWiseFeature> {
    interpret_positions(&map.keys, map.scale, spec)
        .into_iter()
        .enumerate()
        .map(|(i, position)| PointWiseFeature { position, feature: map.features.row(i).to_vec(), source_scale: map.scale })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spec() -> GridSpec {
        GridSpec::new([0.0, -40.0, -3.0], [70.4, 40.0, 1.0], [0.05, 0.05, 0.1]).unwrap()
    }

    #[test]
    fn interpret_origin_cell() {
        let s = GridSpec::new([0.0; 3], [8.0; 3], [1.0; 3]).unwrap();
        assert_eq!(s.cell_center([0, 0, 0], 1), [0.5, 0.5, 0.5]);
    }

    #[test]
    fn interpret_reference_cell() {
        let p = spec().cell_center([1, 2, 3], 1);
        assert!((p[0] - 0.175).abs() < 1e-12);
        assert!((p[1] + 39.875).abs() < 1e-12);
        assert!((p[2] + 2.85).abs() < 1e-12);
    }

    #[test]
    fn reference_grid_dims() {
        assert_eq!(spec().dims(1), [40, 1600, 1408]);
        assert_eq!(spec().dims(4), [5, 200, 176]);
    }

    #[test]
    fn rejects_fractional_grid() {
        assert!(GridSpec::new([0.0; 3], [1.0; 3], [0.3, 0.1, 0.1]).is_err());
        assert!(GridSpec::new([0.0; 3], [1.0; 3], [0.0, 0.1, 0.1]).is_err());
    }

    #[test]
    fn single_point_at_center() {
        let s = spec();
        let c = s.cell_center([4, 9, 7], 1);
        let occ = voxelize(&[c], &s);
        assert_eq!(occ.keys, vec![[4, 9, 7]]);
        let st = occ.stats.row(0);
        assert!(st[..3].iter().all(|v| v.abs() < 1e-9));
        assert_eq!(st[3], 1.0 / 16.0);
    }

    #[test]
    fn symmetric_pair_has_zero_offset() {
        let s = spec();
        let c = s.cell_center([4, 9, 7], 1);
        let d = [0.01, -0.02, 0.03];
        let occ = voxelize(&[[c[0] + d[0], c[1] + d[1], c[2] + d[2]], [c[0] - d[0], c[1] - d[1], c[2] - d[2]]], &s);
        assert_eq!(occ.keys.len(), 1);
        assert!(occ.stats.row(0)[..3].iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn out_of_range_dropped_and_empty_valid() {
        let s = spec();
        assert!(voxelize(&[], &s).keys.is_empty());
        assert!(voxelize(&[[-1.0, 0.0, 0.0], [70.4, 0.0, 0.0]], &s).keys.is_empty());
    }

    #[test]
    fn count_saturates() {
        let s = spec();
        let c = s.cell_center([1, 1, 1], 1);
        assert_eq!(voxelize(&vec![c; 40], &s).stats.row(0)[3], 1.0);
    }

    proptest! {
        #[test]
        fn occupied_set_matches_floor_division(pts in prop::collection::vec(prop::array::uniform3(-5.0f64..75.0), 0..200)) {
            let s = spec();
            let pts: Vec<Point3> = pts.into_iter().map(|p| [p[0], p[1] - 35.0, p[2] / 20.0 - 2.0]).collect();
            let mut want: Vec<VoxelKey> = pts
                .iter()
                .filter(|p| (0..3).all(|a| p[a] >= s.range_min[a] && p[a] < s.range_max[a]))
                .map(|p| {
                    let f = |a: usize| ((p[a] - s.range_min[a]) / s.voxel[a]).floor() as usize;
                    [f(2), f(1), f(0)]
                })
                .collect();
            want.sort();
            want.dedup();
            prop_assert_eq!(voxelize(&pts, &s).keys, want);
        }

        #[test]
        fn interpreted_point_inverts(d in 0usize..5, h in 0usize..200, w in 0usize..176, scale in 1usize..=4) {
            let s = spec();
            let dims = s.dims(scale);
            let key = [d % dims[0], h % dims[1], w % dims[2]];
            let p = s.cell_center(key, scale);
            prop_assert_eq!(s.cell_of(p, scale), Some(key));
        }
    }
}
