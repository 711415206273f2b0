//! Synthetic proposals: ground-truth boxes perturbed in position, size and
//! heading, with random drops and spurious extras.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::mix;
use crate::geometry::{wrap_angle, Point3, Roi};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProposalJitter {
    /// Per-axis center noise, meters.
    pub trans_sigma: Point3,
    /// Log-space size noise.
    pub size_sigma: f64,
    /// Heading noise, radians.
    pub yaw_sigma: f64,
    pub drop_rate: f64,
    /// Expected spurious boxes per ground-truth box.
    pub spurious_rate: f64,
}

impl Default for ProposalJitter {
    fn default() -> Self {
        ProposalJitter { trans_sigma: [0.3, 0.3, 0.1], size_sigma: 0.05, yaw_sigma: 0.1, drop_rate: 0.0, spurious_rate: 0.0 }
    }
}

impl ProposalJitter {
    pub fn validate(&self) -> Result<()> {
        let sig = self.trans_sigma.iter().chain([&self.size_sigma, &self.yaw_sigma]);
        if sig.into_iter().any(|s| !(*s >= 0.0)) {
            return Err(Error::Config("jitter sigmas must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.drop_rate) || !(0.0..=1.0).contains(&self.spurious_rate) {
            return Err(Error::Config("jitter rates must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

fn normal(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// One perturbed copy per surviving gt, in gt order, then the spurious
/// boxes. Every gt consumes the same random draws whatever the settings,
/// so equal seeds give coupled samples across jitter levels.
pub fn jitter_proposals(gts: &[Roi], jitter: &ProposalJitter, seed: u64) -> Vec<Roi> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(gts.len());
    for g in gts {
        let drop = rng.random::<f64>() < jitter.drop_rate;
        let dc: Point3 = [0, 1, 2].map(|a| jitter.trans_sigma[a] * normal(&mut rng));
        let ds: Point3 = [0, 1, 2].map(|_| (jitter.size_sigma * normal(&mut rng)).exp());
        let dy = jitter.yaw_sigma * normal(&mut rng);
        if drop {
            continue;
        }
        out.push(Roi {
            center: [0, 1, 2].map(|a| g.center[a] + dc[a]),
            size: [0, 1, 2].map(|a| g.size[a] * ds[a]),
            yaw: wrap_angle(g.yaw + dy),
            cls: g.cls,
            confidence: 1.0,
        });
    }
    for _ in 0..gts.len() {
        let spawn = rng.random::<f64>() < jitter.spurious_rate;
        let src = gts[rng.random_range(0..gts.len())];
        let dist = rng.random_range(3.0..8.0);
        let dir = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
        let yaw = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
        if spawn {
            let (s, c) = dir.sin_cos();
            out.push(Roi {
                center: [src.center[0] + dist * c, src.center[1] + dist * s, src.center[2]],
                yaw: wrap_angle(yaw),
                confidence: 1.0,
                ..src
            });
        }
    }
    out
}

/// Rounds of jittering used when padding a training sample.
const MAX_ROUNDS: u64 = 64;

/// Exactly `count` proposals (fewer only when jittering keeps yielding
/// nothing): jittered rounds are pooled, capped at `cap`, and a seeded
/// subset of `count` is kept in pooled order.
pub fn sample_training_rois(gts: &[Roi], jitter: &ProposalJitter, count: usize, cap: usize, seed: u64) -> Vec<Roi> {
    let target = count.min(cap);
    let mut pool = Vec::new();
    let mut round = 0;
    while pool.len() < target && round < MAX_ROUNDS {
        pool.extend(jitter_proposals(gts, jitter, mix(seed, round)));
        round += 1;
    }
    pool.truncate(cap);
    if pool.len() <= target {
        return pool;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, u64::MAX));
    let mut keep = sample(&mut rng, pool.len(), target).into_vec();
    keep.sort_unstable();
    keep.into_iter().map(|i| pool[i]).collect()
}
