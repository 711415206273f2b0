use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::geometry::{Point3, Roi};
use crate::voxel::{interpret_positions, GridSpec, SparseFeatureMap};

/// Points pooled by one ROI from one scale.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PooledSet {
    /// Rows of the source scale, ascending.
    pub indices: Vec<usize>,
    /// Canonical-frame positions, parallel to `indices`.
    pub canonical: Vec<Point3>,
}

impl PooledSet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Every point inside the enlarged ROI, in source order.
pub fn pool_candidates(positions: &[Point3], roi: &Roi, enlargement: Point3) -> PooledSet {
    let mut set = PooledSet::default();
    for (i, &p) in positions.iter().enumerate() {
        let q = roi.to_canonical(p);
        if crate::geometry::contains_canonical(q, roi.size, enlargement) {
            set.indices.push(i);
            set.canonical.push(q);
        }
    }
    set
}

/// Uniform subsample without replacement down to `budget`, keeping source
/// order. Sets within budget are returned unchanged.
pub fn subsample(set: &PooledSet, budget: usize, seed: u64) -> PooledSet {
    if set.len() <= budget {
        return set.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = sample(&mut rng, set.len(), budget).into_vec();
    keep.sort_unstable();
    PooledSet {
        indices: keep.iter().map(|&k| set.indices[k]).collect(),
        canonical: keep.iter().map(|&k| set.canonical[k]).collect(),
    }
}

/// Interprets `map`, filters by the enlarged ROI and subsamples to `budget`.
pub fn pool(map: &SparseFeatureMap, spec: &GridSpec, roi: &Roi, enlargement: Point3, budget: usize, seed: u64) -> PooledSet {
    assert!(budget > 0, "pool budget must be positive");
    let positions = interpret_positions(&map.keys, map.scale, spec);
    subsample(&pool_candidates(&positions, roi, enlargement), budget, seed)
}

pub(crate) fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Subsampling seed for one (repeat, scale, ROI) triple. `roi_key` is
/// supplied by the caller and must travel with the ROI, not its position
/// in the batch.
pub fn subsample_seed(global: u64, repeat: usize, scale: usize, roi_key: u64) -> u64 {
    splitmix(splitmix(splitmix(global ^ splitmix(repeat as u64)) ^ scale as u64) ^ roi_key)
}
