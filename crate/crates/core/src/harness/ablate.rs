//! Paired vector-versus-multihead study: both variants train under the same
//! seed, scenes and schedule and are scored on refined mean IoU.

use rayon::prelude::*;
use serde::Serialize;

use super::eval::evaluate;
use super::train::train;
use crate::config::Config;
use crate::rfe::AttentionKind;
use crate::voxel::scene::Scene;
use crate::Result;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub seed: u64,
    pub vector: f64,
    pub multihead: f64,
    pub proposal: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    /// Mean of `vector − multihead` over seeds.
    pub mean_diff: f64,
}

impl AblationReport {
    /// Vector is no worse than multihead by more than `margin` on average.
    pub fn passes(&self, margin: f64) -> bool {
        self.mean_diff >= -margin
    }
}

fn refined_iou(cfg: &Config, scenes: &[Scene], kind: AttentionKind, seed: u64) -> Result<(f64, f64)> {
    let mut cfg = cfg.clone();
    cfg.seed = seed;
    cfg.model.rfe.attention = kind;
    cfg.model.rfe.validate()?;
    let out = train(&cfg, scenes, None, None)?;
    let report = evaluate(&out.trainer.model, &out.trainer.store, scenes, &cfg)?;
    Ok((report.mean_iou_refined, report.mean_iou_proposal))
}

/// Trains and evaluates both variants for every seed.
pub fn ablate(cfg: &Config, scenes: &[Scene], seeds: &[u64]) -> Result<AblationReport> {
    let jobs: Vec<(u64, AttentionKind)> =
        seeds.iter().flat_map(|&s| [(s, AttentionKind::Vector), (s, AttentionKind::Multihead)]).collect();
    let results: Vec<(f64, f64)> = jobs.par_iter().map(|&(s, k)| refined_iou(cfg, scenes, k, s)).collect::<Result<_>>()?;
    let rows: Vec<AblationRow> = seeds
        .iter()
        .enumerate()
        .map(|(i, &seed)| AblationRow {
            seed,
            vector: results[2 * i].0,
            multihead: results[2 * i + 1].0,
            proposal: results[2 * i].1,
        })
        .collect();
    let mean_diff = rows.iter().map(|r| r.vector - r.multihead).sum::<f64>() / rows.len().max(1) as f64;
    Ok(AblationReport { rows, mean_diff })
}
