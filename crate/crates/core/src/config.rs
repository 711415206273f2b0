//! Flat `key = value` configuration. Blank lines and `#` comments are
//! ignored; lists are comma-separated; unknown keys are errors. Every key
//! overrides one field of [`Config`], starting from a preset.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::geometry::{IouMode, Point3};
use crate::harness::{BenchConfig, EvalConfig, ProposalJitter, SceneSpec, TrainConfig};
use crate::heads::{DiagMode, GateMode, ResidueFrame};
use crate::model::ModelConfig;
use crate::rfe::AttentionKind;
use crate::tensor::nn::NormKind;
use crate::voxel::GridSpec;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Config {
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub jitter: ProposalJitter,
    pub eval: EvalConfig,
    pub scene: SceneSpec,
    pub bench: BenchConfig,
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: Display,
{
    v.trim().parse().map_err(|e| Error::Config(format!("{key}: cannot parse {v:?}: {e}")))
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>>
where
    T::Err: Display,
{
    v.split(',').filter(|s| !s.trim().is_empty()).map(|s| parse(key, s)).collect()
}

fn parse_point(key: &str, v: &str) -> Result<Point3> {
    let xs: Vec<f64> = parse_list(key, v)?;
    match xs.as_slice() {
        [x] => Ok([*x; 3]),
        [x, y, z] => Ok([*x, *y, *z]),
        _ => Err(Error::Config(format!("{key}: expected 1 or 3 numbers, got {}", xs.len()))),
    }
}

fn parse_pair(key: &str, v: &str) -> Result<[f64; 2]> {
    let xs: Vec<f64> = parse_list(key, v)?;
    <[f64; 2]>::try_from(xs.as_slice()).map_err(|_| Error::Config(format!("{key}: expected 2 numbers")))
}

fn join<T: Display>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", ")
}

fn attention_name(k: AttentionKind) -> &'static str {
    match k {
        AttentionKind::Vector => "vector",
        AttentionKind::Multihead => "multihead",
    }
}

impl Config {
    /// Small widths and scenes sized for a laptop CPU.
    pub fn desk() -> Self {
        let mut c = Config::default();
        c.model.grid = GridSpec::new([0.0, -12.8, -1.2], [25.6, 12.8, 2.0], [0.1, 0.1, 0.2]).expect("desk grid");
        c.model.rfe.d_a = 32;
        c.model.rfe.hidden = 64;
        c.model.rfe.repeats = 1;
        c.model.rfe.budgets = vec![32, 64, 128];
        c.model.head_hidden = 64;
        c.train.rois_per_scene = 32;
        c.train.epochs = 200;
        c
    }

    /// The desk preset trained for 2000 steps against proposals with 0.3 m
    /// translation noise on every axis and 0.1 rad yaw noise.
    pub fn overfit() -> Self {
        let mut c = Config::desk();
        c.jitter.trans_sigma = [0.3; 3];
        c.jitter.yaw_sigma = 0.1;
        c.train.steps = 2000;
        c
    }

    /// Minimal widths for gradient checks and unit tests.
    pub fn tiny() -> Self {
        let mut c = Config::desk();
        c.model.rfe.d_a = 8;
        c.model.rfe.hidden = 8;
        c.model.rfe.heads = 2;
        c.model.rfe.budgets = vec![4, 6, 8];
        c.model.head_hidden = 8;
        c.train.rois_per_scene = 4;
        c.train.epochs = 1;
        c.scene.boxes_min = 1;
        c.scene.boxes_max = 2;
        c.scene.points_min = 30;
        c.scene.points_max = 60;
        c.scene.ground_points = 100;
        c
    }

    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        match key {
            "seed" => self.seed = parse(key, v)?,
            "grid.range_min" | "grid.range_max" | "grid.voxel" => {
                let p = parse_point(key, v)?;
                let g = m.grid;
                let (lo, hi, vx) = match key {
                    "grid.range_min" => (p, g.range_max, g.voxel),
                    "grid.range_max" => (g.range_min, p, g.voxel),
                    _ => (g.range_min, g.range_max, p),
                };
                m.grid = GridSpec { range_min: lo, range_max: hi, voxel: vx };
            }
            "rfe.d_a" => m.rfe.d_a = parse(key, v)?,
            "rfe.hidden" => m.rfe.hidden = parse(key, v)?,
            "rfe.repeats" => m.rfe.repeats = parse(key, v)?,
            "rfe.scale_order" => m.rfe.scale_order = parse_list(key, v)?,
            "rfe.budgets" => m.rfe.budgets = parse_list(key, v)?,
            "rfe.enlargement" => m.rfe.enlargement = parse_point(key, v)?,
            "rfe.attention" => m.rfe.attention = parse(key, v)?,
            "rfe.heads" => m.rfe.heads = parse(key, v)?,
            "rfe.norm" => m.rfe.norm = parse(key, v)?,
            "head.hidden" => m.head_hidden = parse(key, v)?,
            "refine.chi_h" => m.refine.chi_h = parse(key, v)?,
            "refine.chi_l" => m.refine.chi_l = parse(key, v)?,
            "refine.chi_reg" => m.refine.chi_reg = parse(key, v)?,
            "refine.diag" => m.refine.diag = parse(key, v)?,
            "refine.frame" => m.refine.frame = parse(key, v)?,
            "refine.gate" => m.refine.gate = parse(key, v)?,
            "loss.focal_alpha" => m.refine.focal_alpha = parse(key, v)?,
            "loss.focal_gamma" => m.refine.focal_gamma = parse(key, v)?,
            "loss.huber_delta" => m.refine.huber_delta = parse(key, v)?,
            "loss.refine" => m.refine_loss = parse(key, v)?,
            "loss.aux" => m.aux_loss = parse(key, v)?,
            "train.lr" => self.train.lr = parse(key, v)?,
            "train.schedule" => self.train.schedule = parse(key, v)?,
            "train.max_lr" => self.train.max_lr = parse(key, v)?,
            "train.epochs" => self.train.epochs = parse(key, v)?,
            "train.steps" => self.train.steps = parse(key, v)?,
            "train.rois_per_scene" => self.train.rois_per_scene = parse(key, v)?,
            "train.max_rois" => self.train.max_rois = parse(key, v)?,
            "jitter.trans_sigma" => self.jitter.trans_sigma = parse_point(key, v)?,
            "jitter.size_sigma" => self.jitter.size_sigma = parse(key, v)?,
            "jitter.yaw_sigma" => self.jitter.yaw_sigma = parse(key, v)?,
            "jitter.drop_rate" => self.jitter.drop_rate = parse(key, v)?,
            "jitter.spurious_rate" => self.jitter.spurious_rate = parse(key, v)?,
            "eval.iou_car" => self.eval.iou_car = parse(key, v)?,
            "eval.iou_small" => self.eval.iou_small = parse(key, v)?,
            "eval.iou_mode" => self.eval.iou_mode = parse(key, v)?,
            "eval.nms_threshold" => self.eval.nms_threshold = parse(key, v)?,
            "eval.max_rois" => self.eval.max_rois = parse(key, v)?,
            "eval.proposal_seed" => self.eval.proposal_seed = parse(key, v)?,
            "eval.calibration_bins" => self.eval.calibration_bins = parse(key, v)?,
            "scene.boxes_min" => self.scene.boxes_min = parse(key, v)?,
            "scene.boxes_max" => self.scene.boxes_max = parse(key, v)?,
            "scene.points_min" => self.scene.points_min = parse(key, v)?,
            "scene.points_max" => self.scene.points_max = parse(key, v)?,
            "scene.ground_points" => self.scene.ground_points = parse(key, v)?,
            "scene.noise" => self.scene.noise = parse(key, v)?,
            "scene.pedestrian_frac" => self.scene.pedestrian_frac = parse(key, v)?,
            "scene.area_min" => self.scene.area_min = parse_pair(key, v)?,
            "scene.area_max" => self.scene.area_max = parse_pair(key, v)?,
            "bench.rois" => self.bench.rois = parse_list(key, v)?,
            "bench.budgets" => self.bench.budgets = parse_list(key, v)?,
            "bench.attention" => self.bench.kinds = parse_list(key, v)?,
            "bench.d_a" => self.bench.d_a = parse(key, v)?,
            "bench.hidden" => self.bench.hidden = parse(key, v)?,
            "bench.heads" => self.bench.heads = parse(key, v)?,
            "bench.repetitions" => self.bench.repetitions = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Applies every assignment in `text` on top of `self`, then validates.
    pub fn apply(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {raw:?}", n + 1)))?;
            self.set(k.trim(), v.trim()).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("line {}: {m}", n + 1)),
                other => other,
            })?;
        }
        self.validate()
    }

    /// The desk preset overridden by `text`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Config::desk();
        c.apply(text)?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Config::parse(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        GridSpec::new(m.grid.range_min, m.grid.range_max, m.grid.voxel)?;
        m.rfe.validate()?;
        m.refine.validate()?;
        if m.head_hidden == 0 {
            return Err(Error::Config("head.hidden must be positive".into()));
        }
        self.train.validate()?;
        self.jitter.validate()?;
        self.scene.validate()?;
        let e = &self.eval;
        if !(e.nms_threshold > 0.0 && e.nms_threshold < 1.0) {
            return Err(Error::Config("eval.nms_threshold must lie in (0, 1)".into()));
        }
        if [e.iou_car, e.iou_small].iter().any(|t| !(*t > 0.0 && *t <= 1.0)) {
            return Err(Error::Config("eval IoU thresholds must lie in (0, 1]".into()));
        }
        Ok(())
    }

    /// Every key with its current value, in a form [`Config::parse`] reads
    /// back to an equal config.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let p = |x: Point3| join(&x);
        let diag = match m.refine.diag {
            DiagMode::Base => "base",
            DiagMode::Center => "center",
        };
        let frame = match m.refine.frame {
            ResidueFrame::Lidar => "lidar",
            ResidueFrame::Canonical => "canonical",
        };
        let gate = match m.refine.gate {
            GateMode::Iou => "iou",
            GateMode::Normalized => "normalized",
        };
        let norm = match m.rfe.norm {
            NormKind::Batch => "batch",
            NormKind::Layer => "layer",
        };
        let schedule = match self.train.schedule {
            crate::harness::Schedule::Constant => "constant",
            crate::harness::Schedule::OneCycle => "one_cycle",
        };
        let mode = match self.eval.iou_mode {
            IouMode::Full3d => "3d",
            IouMode::Bev => "bev",
        };
        let kinds: Vec<&str> = self.bench.kinds.iter().map(|&k| attention_name(k)).collect();
        let lines: Vec<(&str, String)> = vec![
            ("seed", self.seed.to_string()),
            ("grid.range_min", p(m.grid.range_min)),
            ("grid.range_max", p(m.grid.range_max)),
            ("grid.voxel", p(m.grid.voxel)),
            ("rfe.d_a", m.rfe.d_a.to_string()),
            ("rfe.hidden", m.rfe.hidden.to_string()),
            ("rfe.repeats", m.rfe.repeats.to_string()),
            ("rfe.scale_order", join(&m.rfe.scale_order)),
            ("rfe.budgets", join(&m.rfe.budgets)),
            ("rfe.enlargement", p(m.rfe.enlargement)),
            ("rfe.attention", attention_name(m.rfe.attention).into()),
            ("rfe.heads", m.rfe.heads.to_string()),
            ("rfe.norm", norm.into()),
            ("head.hidden", m.head_hidden.to_string()),
            ("refine.chi_h", m.refine.chi_h.to_string()),
            ("refine.chi_l", m.refine.chi_l.to_string()),
            ("refine.chi_reg", m.refine.chi_reg.to_string()),
            ("refine.diag", diag.into()),
            ("refine.frame", frame.into()),
            ("refine.gate", gate.into()),
            ("loss.focal_alpha", m.refine.focal_alpha.to_string()),
            ("loss.focal_gamma", m.refine.focal_gamma.to_string()),
            ("loss.huber_delta", m.refine.huber_delta.to_string()),
            ("loss.refine", m.refine_loss.to_string()),
            ("loss.aux", m.aux_loss.to_string()),
            ("train.lr", self.train.lr.to_string()),
            ("train.schedule", schedule.into()),
            ("train.max_lr", self.train.max_lr.to_string()),
            ("train.epochs", self.train.epochs.to_string()),
            ("train.steps", self.train.steps.to_string()),
            ("train.rois_per_scene", self.train.rois_per_scene.to_string()),
            ("train.max_rois", self.train.max_rois.to_string()),
            ("jitter.trans_sigma", p(self.jitter.trans_sigma)),
            ("jitter.size_sigma", self.jitter.size_sigma.to_string()),
            ("jitter.yaw_sigma", self.jitter.yaw_sigma.to_string()),
            ("jitter.drop_rate", self.jitter.drop_rate.to_string()),
            ("jitter.spurious_rate", self.jitter.spurious_rate.to_string()),
            ("eval.iou_car", self.eval.iou_car.to_string()),
            ("eval.iou_small", self.eval.iou_small.to_string()),
            ("eval.iou_mode", mode.into()),
            ("eval.nms_threshold", self.eval.nms_threshold.to_string()),
            ("eval.max_rois", self.eval.max_rois.to_string()),
            ("eval.proposal_seed", self.eval.proposal_seed.to_string()),
            ("eval.calibration_bins", self.eval.calibration_bins.to_string()),
            ("scene.boxes_min", self.scene.boxes_min.to_string()),
            ("scene.boxes_max", self.scene.boxes_max.to_string()),
            ("scene.points_min", self.scene.points_min.to_string()),
            ("scene.points_max", self.scene.points_max.to_string()),
            ("scene.ground_points", self.scene.ground_points.to_string()),
            ("scene.noise", self.scene.noise.to_string()),
            ("scene.pedestrian_frac", self.scene.pedestrian_frac.to_string()),
            ("scene.area_min", join(&self.scene.area_min)),
            ("scene.area_max", join(&self.scene.area_max)),
            ("bench.rois", join(&self.bench.rois)),
            ("bench.budgets", join(&self.bench.budgets)),
            ("bench.attention", kinds.join(", ")),
            ("bench.d_a", self.bench.d_a.to_string()),
            ("bench.hidden", self.bench.hidden.to_string()),
            ("bench.heads", self.bench.heads.to_string()),
            ("bench.repetitions", self.bench.repetitions.to_string()),
        ];
        lines.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn comments_lists_and_points() {
        let c = Config::parse(
            "# desk run\nseed = 7\nrfe.budgets = 8, 16, 32 # per scale\n\nrfe.enlargement = 0.25\njitter.trans_sigma = 0.3, 0.3, 0.1\nrfe.attention = multihead\n",
        )
        .unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.model.rfe.budgets, vec![8, 16, 32]);
        assert_eq!(c.model.rfe.enlargement, [0.25; 3]);
        assert_eq!(c.jitter.trans_sigma, [0.3, 0.3, 0.1]);
        assert_eq!(c.model.rfe.attention, AttentionKind::Multihead);
    }

    #[test]
    fn unknown_key_and_bad_value_are_errors() {
        assert!(matches!(Config::parse("rfe.bogus = 1"), Err(Error::Config(_))));
        assert!(matches!(Config::parse("rfe.d_a = many"), Err(Error::Config(_))));
        assert!(matches!(Config::parse("no equals sign"), Err(Error::Config(_))));
    }

    #[test]
    fn invalid_combination_is_rejected() {
        assert!(Config::parse("rfe.attention = multihead\nrfe.heads = 3").is_err());
        assert!(Config::parse("grid.voxel = 0.3").is_err());
        assert!(Config::parse("refine.chi_l = 0.9").is_err());
    }

    #[test]
    fn text_round_trips() {
        for c in [Config::default(), Config::desk(), Config::tiny()] {
            assert_eq!(Config::parse(&c.to_text()).unwrap(), c);
        }
    }
}
