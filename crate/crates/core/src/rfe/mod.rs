//! The ROI feature encoder: multi-scale pooling, vertex-aware position
//! encoding, and the attention module, repeated over scales and rounds.

pub mod attention;
pub mod block;
pub mod encoding;
pub mod pool;

pub use attention::{AttentionKind, AttentionOutput, AttentionParams};
pub use block::RfeBlock;
pub use encoding::{augmented_coord, encoding_input, AUGMENTED_DIM};
pub use pool::{pool, pool_candidates, subsample, subsample_seed, PooledSet};

use rand::Rng;

use crate::geometry::{Point3, Roi};
use crate::tensor::nn::{Ctx, NormKind, ParamId, ParamStore};
use crate::tensor::{Result, Tensor, TensorError, Var};
use crate::voxel::{interpret_positions, EncodedScale, GridSpec, CHANNELS, NUM_SCALES};

#[derive(Debug, Clone, PartialEq)]
pub struct RfeConfig {
    pub d_a: usize,
    /// Hidden width of the attention-module, position and `γ` MLPs.
    pub hidden: usize,
    pub repeats: usize,
    /// Scales pooled per round, in order.
    pub scale_order: Vec<usize>,
    /// Point budget per entry of `scale_order`.
    pub budgets: Vec<usize>,
    /// Added to each full ROI extent before pooling.
    pub enlargement: Point3,
    pub attention: AttentionKind,
    pub heads: usize,
    pub norm: NormKind,
}

impl Default for RfeConfig {
    fn default() -> Self {
        RfeConfig {
            d_a: 128,
            hidden: 256,
            repeats: 3,
            scale_order: vec![4, 3, 1],
            budgets: vec![64, 128, 256],
            enlargement: [0.5; 3],
            attention: AttentionKind::Vector,
            heads: 4,
            norm: NormKind::Layer,
        }
    }
}

impl RfeConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TensorError::Config(m));
        if self.repeats == 0 {
            return bad("rfe.repeats must be at least 1".into());
        }
        if self.d_a == 0 || self.hidden == 0 {
            return bad("rfe.d_a and rfe.hidden must be positive".into());
        }
        if self.scale_order.len() != self.budgets.len() {
            return bad(format!("{} scales but {} budgets", self.scale_order.len(), self.budgets.len()));
        }
        if self.scale_order.iter().any(|&s| s == 0 || s > NUM_SCALES) {
            return bad(format!("scales must lie in 1..={NUM_SCALES}"));
        }
        if self.budgets.contains(&0) {
            return bad("pool budgets must be positive".into());
        }
        if self.enlargement.iter().any(|e| !(*e >= 0.0)) {
            return bad("enlargement must be non-negative".into());
        }
        if self.attention == AttentionKind::Multihead && (self.heads == 0 || self.d_a % self.heads != 0) {
            return bad(format!("d_a {} is not divisible by {} heads", self.d_a, self.heads));
        }
        Ok(())
    }
}

/// Interpreted points of one scale: cell-center positions and feature rows.
#[derive(Debug, Clone)]
pub struct ScaleInput {
    pub scale: usize,
    pub positions: Vec<Point3>,
    /// `[positions.len(), C]`.
    pub features: Var,
}

impl ScaleInput {
    pub fn from_encoded(enc: &EncodedScale, spec: &GridSpec) -> Self {
        ScaleInput { scale: enc.scale, positions: interpret_positions(&enc.keys, enc.scale, spec), features: enc.features }
    }
}

/// Initial feature `Θ` and one block per (round, pooled scale).
#[derive(Debug, Clone)]
pub struct Rfe {
    pub cfg: RfeConfig,
    pub theta: ParamId,
    /// `blocks[round][k]` pools `cfg.scale_order[k]`.
    pub blocks: Vec<Vec<RfeBlock>>,
}

impl Rfe {
    pub fn new(store: &mut ParamStore, name: &str, cfg: RfeConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let theta = store.add_uniform(format!("{name}.theta"), &[1, cfg.d_a], cfg.d_a, rng);
        let mut blocks = Vec::with_capacity(cfg.repeats);
        for n in 0..cfg.repeats {
            let mut round = Vec::with_capacity(cfg.scale_order.len());
            for &s in &cfg.scale_order {
                round.push(RfeBlock::new(
                    store,
                    &format!("{name}.r{n}.s{s}"),
                    CHANNELS[s - 1],
                    cfg.d_a,
                    cfg.hidden,
                    cfg.attention,
                    cfg.heads,
                    cfg.norm,
                    rng,
                )?);
            }
            blocks.push(round);
        }
        Ok(Rfe { cfg, theta, blocks })
    }

    /// Pooled sets of every ROI for round `repeat` and scale-order slot `k`,
    /// given the per-ROI candidates of that scale.
    pub fn pooled_sets(&self, candidates: &[PooledSet], repeat: usize, k: usize, roi_keys: &[u64], seed: u64) -> Vec<PooledSet> {
        let scale = self.cfg.scale_order[k];
        candidates
            .iter()
            .zip(roi_keys)
            .map(|(c, &key)| subsample(c, self.cfg.budgets[k], subsample_seed(seed, repeat, scale, key)))
            .collect()
    }

    /// ROI features `[M, d_a]`. `inputs` must hold every scale named in
    /// `scale_order`; `roi_keys` identify ROIs for subsampling seeds.
    pub fn compute_roi_features(
        &self,
        ctx: &mut Ctx,
        inputs: &[ScaleInput],
        rois: &[Roi],
        roi_keys: &[u64],
        seed: u64,
    ) -> Result<Var> {
        if roi_keys.len() != rois.len() {
            return Err(TensorError::Contract("one key per ROI".into()));
        }
        let d = self.cfg.d_a;
        if rois.is_empty() {
            return Ok(ctx.tape.constant(Tensor::zeros(&[0, d])));
        }
        let theta = ctx.p(self.theta);
        let mut r = ctx.tape.gather_rows(theta, std::sync::Arc::new(vec![0; rois.len()]))?;
        let mut candidates = Vec::with_capacity(self.cfg.scale_order.len());
        for &s in &self.cfg.scale_order {
            let input = inputs
                .iter()
                .find(|i| i.scale == s)
                .ok_or_else(|| TensorError::Contract(format!("scale {s} missing from inputs")))?;
            let c: Vec<PooledSet> = rois.iter().map(|roi| pool_candidates(&input.positions, roi, self.cfg.enlargement)).collect();
            candidates.push((input.features, c));
        }
        for (n, round) in self.blocks.iter().enumerate() {
            for (k, block) in round.iter().enumerate() {
                let (source, cands) = &candidates[k];
                let pooled = self.pooled_sets(cands, n, k, roi_keys, seed);
                r = block.forward(ctx, r, *source, &pooled, rois)?;
            }
        }
        Ok(r)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> RfeConfig {
        RfeConfig { d_a: 8, hidden: 16, repeats: 2, ..Default::default() }
    }

    fn inputs(ctx: &mut Ctx, rng: &mut ChaCha8Rng, n: usize) -> Vec<ScaleInput> {
        (1..=4)
            .map(|s| {
                let positions: Vec<Point3> = (0..n)
                    .map(|_| [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-1.0..1.0)])
                    .collect();
                let c = CHANNELS[s - 1];
                let f = Tensor::new((0..n * c).map(|_| rng.random_range(0.0..1.0)).collect(), vec![n, c]).unwrap();
                ScaleInput { scale: s, positions, features: ctx.tape.constant(f) }
            })
            .collect()
    }

    #[test]
    fn config_validation() {
        assert!(RfeConfig::default().validate().is_ok());
        assert!(RfeConfig { repeats: 0, ..Default::default() }.validate().is_err());
        assert!(RfeConfig { budgets: vec![1], ..Default::default() }.validate().is_err());
        assert!(RfeConfig { attention: AttentionKind::Multihead, heads: 3, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn zero_rois_and_empty_pools() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let rfe = Rfe::new(&mut store, "rfe", tiny(), &mut rng).unwrap();
        let mut ctx = Ctx::new(&store, false);
        let ins = inputs(&mut ctx, &mut rng, 50);
        let out = rfe.compute_roi_features(&mut ctx, &ins, &[], &[], 0).unwrap();
        assert_eq!(ctx.tape.shape(out), &[0, 8]);

        let far = Roi::new([100.0, 0.0, 0.0], [1.0; 3], 0.0, 0).unwrap();
        let out = rfe.compute_roi_features(&mut ctx, &ins, &[far], &[0], 0).unwrap();
        assert_eq!(ctx.tape.value(out).data(), store.value(rfe.theta).data());
    }

    #[test]
    fn roi_permutation_permutes_features() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let rfe = Rfe::new(&mut store, "rfe", tiny(), &mut rng).unwrap();
        let mut ctx = Ctx::new(&store, false);
        let ins = inputs(&mut ctx, &mut rng, 400);
        let rois: Vec<Roi> =
            (0..4).map(|i| Roi::new([i as f64 - 1.5, 0.5, 0.0], [1.5, 1.0, 1.0], 0.2 * i as f64, 0).unwrap()).collect();
        let keys = [10, 11, 12, 13];
        let a = rfe.compute_roi_features(&mut ctx, &ins, &rois, &keys, 5).unwrap();
        let perm = [2, 0, 3, 1];
        let prois: Vec<Roi> = perm.iter().map(|&i| rois[i]).collect();
        let pkeys: Vec<u64> = perm.iter().map(|&i| keys[i]).collect();
        let b = rfe.compute_roi_features(&mut ctx, &ins, &prois, &pkeys, 5).unwrap();
        let (a, b) = (ctx.tape.value(a).clone(), ctx.tape.value(b).clone());
        for (j, &i) in perm.iter().enumerate() {
            assert_eq!(a.row(i), b.row(j));
        }
    }
}
