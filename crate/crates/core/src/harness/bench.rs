//! Throughput and allocation measurements of ROI feature computation.
//! Allocation figures are meaningful only when [`crate::alloc::CountingAlloc`]
//! is the global allocator and nothing else runs concurrently.

use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::alloc::measure_peak;
use crate::geometry::{Point3, Roi};
use crate::rfe::{AttentionKind, AttentionParams, Rfe, RfeConfig, ScaleInput};
use crate::tensor::nn::{Ctx, ParamStore};
use crate::tensor::{Segments, Tensor};
use crate::voxel::CHANNELS;
use crate::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub rois: Vec<usize>,
    pub budgets: Vec<usize>,
    pub kinds: Vec<AttentionKind>,
    pub d_a: usize,
    pub hidden: usize,
    pub heads: usize,
    /// Timed repetitions after one warm-up.
    pub repetitions: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            rois: vec![10, 100, 512],
            budgets: vec![64, 256],
            kinds: vec![AttentionKind::Vector, AttentionKind::Multihead],
            d_a: 32,
            hidden: 64,
            heads: 4,
            repetitions: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub attention: String,
    pub m: usize,
    pub n_r: usize,
    pub d_a: usize,
    pub wall_ms_median: f64,
    pub wall_ms_min: f64,
    pub wall_ms_max: f64,
    /// Peak heap growth during one full ROI feature computation.
    pub peak_bytes: usize,
    /// Peak heap growth during one attention call over pre-embedded inputs.
    pub attention_bytes: usize,
    pub finite: bool,
}

pub const CSV_HEADER: &str = "attention,m,n_r,d_a,wall_ms_median,wall_ms_min,wall_ms_max,peak_bytes,attention_bytes,finite";

impl BenchRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{:.4},{:.4},{:.4},{},{},{}",
            self.attention,
            self.m,
            self.n_r,
            self.d_a,
            self.wall_ms_median,
            self.wall_ms_min,
            self.wall_ms_max,
            self.peak_bytes,
            self.attention_bytes,
            self.finite
        )
    }

    /// `max / min` wall-clock over the timed repetitions, minus one.
    pub fn spread(&self) -> f64 {
        self.wall_ms_max / self.wall_ms_min - 1.0
    }
}

fn kind_name(k: AttentionKind) -> &'static str {
    match k {
        AttentionKind::Vector => "vector",
        AttentionKind::Multihead => "multihead",
    }
}

/// `m` unit-spaced ROIs, each with `2 n_r` scale-1 points inside.
fn fixture(m: usize, n_r: usize, rng: &mut ChaCha8Rng) -> (Vec<Roi>, Vec<Point3>, Tensor) {
    let rois: Vec<Roi> = (0..m)
        .map(|i| Roi::new([(i % 32) as f64 * 6.0, (i / 32) as f64 * 6.0, 0.8], [4.0, 1.8, 1.6], rng.random_range(-3.0..3.0), 0))
        .collect::<std::result::Result<_, _>>()
        .expect("fixture boxes are valid");
    let mut positions = Vec::with_capacity(2 * m * n_r);
    for roi in &rois {
        for _ in 0..2 * n_r {
            positions.push(roi.from_canonical([0, 1, 2].map(|a| rng.random_range(-0.45..0.45) * roi.size[a])));
        }
    }
    let c = CHANNELS[0];
    let feats = Tensor::new((0..positions.len() * c).map(|_| rng.random_range(-1.0..1.0)).collect(), vec![positions.len(), c])
        .expect("fixture features");
    (rois, positions, feats)
}

fn rfe_config(cfg: &BenchConfig, kind: AttentionKind, n_r: usize) -> RfeConfig {
    RfeConfig {
        d_a: cfg.d_a,
        hidden: cfg.hidden,
        repeats: 1,
        scale_order: vec![1],
        budgets: vec![n_r],
        enlargement: [0.0; 3],
        attention: kind,
        heads: cfg.heads,
        ..Default::default()
    }
}

/// Peak heap growth of one attention call over `m` sets of `n_r` points,
/// with every input and parameter binding allocated beforehand.
pub fn attention_bytes(
    kind: AttentionKind,
    m: usize,
    n_r: usize,
    d_a: usize,
    hidden: usize,
    heads: usize,
    seed: u64,
) -> Result<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let attn = AttentionParams::new(&mut store, "attn", kind, d_a, hidden, heads, &mut rng)?;
    let mut ctx = Ctx::new(&store, false);
    for id in store.ids() {
        ctx.p(id);
    }
    let mut rand_var = |ctx: &mut Ctx, rows: usize| {
        let t = Tensor::new((0..rows * d_a).map(|_| rng.random_range(-1.0..1.0)).collect(), vec![rows, d_a]).expect("shape");
        ctx.tape.constant(t)
    };
    let r = rand_var(&mut ctx, m);
    let feats = rand_var(&mut ctx, m * n_r);
    let zeta = rand_var(&mut ctx, m * n_r);
    let segs = Arc::new(Segments::from_counts(&vec![n_r; m]));
    let (out, bytes) = measure_peak(|| attn.forward(&mut ctx, r, feats, zeta, &segs).map(|o| o.out));
    out?;
    Ok(bytes)
}

fn run_case(cfg: &BenchConfig, kind: AttentionKind, m: usize, n_r: usize, seed: u64) -> Result<BenchRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (rois, positions, feats) = fixture(m, n_r, &mut rng);
    let mut store = ParamStore::new();
    let rfe = Rfe::new(&mut store, "rfe", rfe_config(cfg, kind, n_r), &mut rng)?;
    let keys: Vec<u64> = (0..m as u64).collect();
    let once = || -> Result<(f64, usize, bool)> {
        let mut ctx = Ctx::new(&store, false);
        for id in store.ids() {
            ctx.p(id);
        }
        let input = ScaleInput { scale: 1, positions: positions.clone(), features: ctx.tape.constant(feats.clone()) };
        let start = Instant::now();
        let (out, bytes) = measure_peak(|| rfe.compute_roi_features(&mut ctx, std::slice::from_ref(&input), &rois, &keys, seed));
        let ms = start.elapsed().as_secs_f64() * 1e3;
        let finite = ctx.tape.value(out?).is_finite();
        Ok((ms, bytes, finite))
    };
    once()?;
    let mut times = Vec::with_capacity(cfg.repetitions);
    let mut peak = 0;
    let mut finite = true;
    for _ in 0..cfg.repetitions.max(1) {
        let (ms, bytes, ok) = once()?;
        times.push(ms);
        peak = peak.max(bytes);
        finite &= ok;
    }
    times.sort_by(f64::total_cmp);
    Ok(BenchRow {
        attention: kind_name(kind).into(),
        m,
        n_r,
        d_a: cfg.d_a,
        wall_ms_median: times[times.len() / 2],
        wall_ms_min: times[0],
        wall_ms_max: times[times.len() - 1],
        peak_bytes: peak,
        attention_bytes: attention_bytes(kind, m, n_r, cfg.d_a, cfg.hidden, cfg.heads, seed)?,
        finite,
    })
}

/// Every `(kind, M, N_r)` combination, in that nesting order.
pub fn bench(cfg: &BenchConfig, seed: u64) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::new();
    for &kind in &cfg.kinds {
        for &m in &cfg.rois {
            for &n_r in &cfg.budgets {
                rows.push(run_case(cfg, kind, m, n_r, seed)?);
            }
        }
    }
    Ok(rows)
}
