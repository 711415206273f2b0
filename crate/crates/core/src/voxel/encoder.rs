use std::sync::Arc;

use rand::Rng;

use super::{Occupancy, SparseFeatureMap, VoxelKey};
use crate::tensor::nn::{Ctx, LinearLayer, ParamStore};
use crate::tensor::{Result, Segments, Tensor, Var};

pub const NUM_SCALES: usize = 4;
pub const CHANNELS: [usize; NUM_SCALES] = [16, 32, 64, 64];
const RAW_STATS: usize = 4;

/// One scale of encoder output; `features` rows follow `keys`.
#[derive(Debug, Clone)]
pub struct EncodedScale {
    pub scale: usize,
    pub keys: Vec<VoxelKey>,
    pub features: Var,
}

impl EncodedScale {
    pub fn to_map(&self, ctx: &Ctx) -> SparseFeatureMap {
        SparseFeatureMap { scale: self.scale, keys: self.keys.clone(), features: ctx.tape.value(self.features).clone() }
    }
}

/// Stand-in for a sparse convolutional backbone: a per-voxel linear layer
/// at scale 1, then per scale a channelwise max over the (at most 8)
/// children of each parent cell followed by linear + ReLU.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub stem: LinearLayer,
    pub merges: Vec<LinearLayer>,
}

/// Parent keys (sorted) and, for each parent, the rows of its children.
fn group_children(keys: &[VoxelKey]) -> (Vec<VoxelKey>, Vec<usize>, Vec<usize>) {
    let mut order: Vec<(VoxelKey, usize)> = keys.iter().enumerate().map(|(i, k)| ([k[0] / 2, k[1] / 2, k[2] / 2], i)).collect();
    order.sort();
    let mut parents: Vec<VoxelKey> = Vec::new();
    let mut counts = Vec::new();
    for (p, _) in &order {
        if parents.last() == Some(p) {
            *counts.last_mut().unwrap() += 1;
        } else {
            parents.push(*p);
            counts.push(1);
        }
    }
    (parents, counts, order.into_iter().map(|(_, i)| i).collect())
}

impl Encoder {
    pub fn new(store: &mut ParamStore, name: &str, rng: &mut impl Rng) -> Self {
        let stem = LinearLayer::new(store, &format!("{name}.stem"), RAW_STATS, CHANNELS[0], rng);
        let merges = (1..NUM_SCALES)
            .map(|i| LinearLayer::new(store, &format!("{name}.merge{i}"), CHANNELS[i - 1], CHANNELS[i], rng))
            .collect();
        Encoder { stem, merges }
    }

    /// Feature maps for scales 1..=4.
    pub fn forward(&self, ctx: &mut Ctx, occ: &Occupancy) -> Result<Vec<EncodedScale>> {
        if occ.keys.is_empty() {
            return Ok((0..NUM_SCALES)
                .map(|i| EncodedScale {
                    scale: i + 1,
                    keys: Vec::new(),
                    features: ctx.tape.constant(Tensor::zeros(&[0, CHANNELS[i]])),
                })
                .collect());
        }
        let raw = ctx.tape.constant(occ.stats.clone());
        let f1 = self.stem.forward(ctx, raw)?;
        let f1 = ctx.tape.relu(f1)?;
        let mut out = vec![EncodedScale { scale: 1, keys: occ.keys.clone(), features: f1 }];
        for (i, merge) in self.merges.iter().enumerate() {
            let prev = &out[i];
            let (parents, counts, order) = group_children(&prev.keys);
            let sorted = ctx.tape.gather_rows(prev.features, Arc::new(order))?;
            let pooled = ctx.tape.segment_max(sorted, &Segments::from_counts(&counts))?;
            let f = merge.forward(ctx, pooled)?;
            let f = ctx.tape.relu(f)?;
            out.push(EncodedScale { scale: i + 2, keys: parents, features: f });
        }
        Ok(out)
    }
}
