//! Single-scene-per-step Adam training with CSV traces, per-epoch
//! checkpoints and exact resumption.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Serialize;

use super::jitter::sample_training_rois;
use super::mix;
use crate::config::Config;
use crate::geometry::Roi;
use crate::model::Model;
use crate::tensor::checkpoint::Checkpoint;
use crate::tensor::nn::{Ctx, ParamStore};
use crate::tensor::optim::{Adam, AdamHyper, LrSchedule};
use crate::tensor::Tensor;
use crate::voxel::scene::Scene;
use crate::voxel::{voxelize, Occupancy};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Schedule {
    #[default]
    Constant,
    OneCycle,
}

impl FromStr for Schedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(Schedule::Constant),
            "one_cycle" | "onecycle" => Ok(Schedule::OneCycle),
            _ => Err(Error::Config(format!("unknown schedule {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Constant learning rate; 0 computes losses without updating.
    pub lr: f64,
    pub schedule: Schedule,
    /// Peak rate of the one-cycle schedule.
    pub max_lr: f64,
    pub epochs: u64,
    /// Total steps; 0 means `epochs` passes over the scenes.
    pub steps: u64,
    pub rois_per_scene: usize,
    /// Proposal cap per scene before sampling.
    pub max_rois: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            schedule: Schedule::Constant,
            max_lr: 0.01,
            epochs: 10,
            steps: 0,
            rois_per_scene: 128,
            max_rois: 512,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || !(self.max_lr > 0.0) {
            return Err(Error::Config("train.lr must be >= 0 and train.max_lr > 0".into()));
        }
        if self.rois_per_scene == 0 || self.max_rois == 0 {
            return Err(Error::Config("train.rois_per_scene and train.max_rois must be positive".into()));
        }
        Ok(())
    }
}

/// One CSV line; disabled loss terms are 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TraceRow {
    pub step: u64,
    pub total: f64,
    pub refine: f64,
    pub aux: f64,
}

pub const TRACE_HEADER: &str = "step,total,refine,aux";

impl TraceRow {
    pub fn csv(&self) -> String {
        format!("{},{},{},{}", self.step, self.total, self.refine, self.aux)
    }
}

struct Prepared {
    occ: Occupancy,
    gts: Vec<Roi>,
}

/// Owns the model, its parameters and the optimizer. Step `s` (0-based)
/// trains on scene `s mod n` with randomness derived from `(seed, s)` only,
/// so a run can stop and resume anywhere.
pub struct Trainer {
    pub cfg: Config,
    pub model: Model,
    pub store: ParamStore,
    pub adam: Adam,
    /// Completed steps.
    pub step: u64,
    scenes: Vec<Prepared>,
}

const OPTIM_PREFIX: &str = "optim";
const STEP_KEY: &str = "train.step";

#[derive(Serialize)]
struct NanDump<'a> {
    step: u64,
    scene: usize,
    error: String,
    rois: &'a [Roi],
    gts: &'a [Roi],
}

impl Trainer {
    pub fn new(cfg: &Config, scenes: &[Scene]) -> Result<Self> {
        cfg.train.validate()?;
        cfg.jitter.validate()?;
        if scenes.is_empty() {
            return Err(Error::Contract("training needs at least one scene".into()));
        }
        let mut store = ParamStore::new();
        let model = Model::new(&mut store, cfg.model.clone(), cfg.seed)?;
        let adam = Adam::new(&store, AdamHyper { lr: cfg.train.lr.max(f64::MIN_POSITIVE), ..Default::default() });
        let scenes = scenes
            .iter()
            .map(|s| Ok(Prepared { occ: voxelize(&s.points, &cfg.model.grid), gts: s.gt_rois()? }))
            .collect::<Result<Vec<_>>>()?;
        Ok(Trainer { cfg: cfg.clone(), model, store, adam, step: 0, scenes })
    }

    /// Restores parameters, optimizer moments and the step counter.
    pub fn resume(cfg: &Config, scenes: &[Scene], ckpt: &Checkpoint) -> Result<Self> {
        let mut t = Trainer::new(cfg, scenes)?;
        ckpt.load_into(&mut t.store)?;
        t.adam.import(&t.store, OPTIM_PREFIX, |k| ckpt.get(k).cloned())?;
        t.step = ckpt.get(STEP_KEY).ok_or_else(|| Error::Contract(format!("checkpoint lacks {STEP_KEY}")))?.data()[0] as u64;
        Ok(t)
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.scenes.len() as u64
    }

    pub fn total_steps(&self) -> u64 {
        if self.cfg.train.steps > 0 {
            self.cfg.train.steps
        } else {
            self.cfg.train.epochs * self.steps_per_epoch()
        }
    }

    pub fn schedule(&self) -> LrSchedule {
        match self.cfg.train.schedule {
            Schedule::Constant => LrSchedule::Constant(self.cfg.train.lr),
            Schedule::OneCycle => LrSchedule::one_cycle(self.cfg.train.max_lr, self.total_steps()),
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::from_store(&self.store);
        for (k, v) in self.adam.export(&self.store, OPTIM_PREFIX) {
            ckpt.insert(k, v);
        }
        ckpt.insert(STEP_KEY, Tensor::scalar(self.step as f64));
        ckpt
    }

    /// ROIs and pooling seed used at step `step`.
    pub fn step_inputs(&self, step: u64) -> (usize, Vec<Roi>, u64) {
        let scene = (step % self.steps_per_epoch()) as usize;
        let seed = mix(self.cfg.seed, step);
        let t = &self.cfg.train;
        let rois = sample_training_rois(&self.scenes[scene].gts, &self.cfg.jitter, t.rois_per_scene, t.max_rois, mix(seed, 1));
        (scene, rois, mix(seed, 2))
    }

    /// Runs one step. On a failed or non-finite loss the batch is written
    /// to `dump` (when given) and an error is returned.
    pub fn step_once(&mut self, dump: Option<&Path>) -> Result<TraceRow> {
        let step = self.step;
        let (si, rois, pool_seed) = self.step_inputs(step);
        let keys: Vec<u64> = (0..rois.len() as u64).collect();
        let scene = &self.scenes[si];
        let result = (|| {
            let mut ctx = Ctx::new(&self.store, true);
            let (terms, _) = self.model.loss(&mut ctx, &scene.occ, &rois, &keys, &scene.gts, pool_seed)?;
            let val = |v: Option<crate::tensor::Var>| v.map_or(0.0, |v| ctx.tape.value(v).data()[0]);
            let row = TraceRow { step, total: val(Some(terms.total)), refine: val(terms.refine), aux: val(terms.aux) };
            if !row.total.is_finite() {
                return Err(Error::Contract(format!("non-finite loss {} at step {step}", row.total)));
            }
            ctx.tape.backward(terms.total)?;
            let (tape, stats) = ctx.finish();
            Ok((row, tape, stats))
        })();
        let (row, tape, stats) = match result {
            Ok(x) => x,
            Err(e) => {
                if let Some(path) = dump {
                    let d = NanDump { step, scene: si, error: e.to_string(), rois: &rois, gts: &scene.gts };
                    fs::write(path, serde_json::to_string_pretty(&d).map_err(|e| Error::Contract(e.to_string()))?)?;
                }
                return Err(e);
            }
        };
        self.store.zero_grads();
        self.store.accumulate_grads(&tape);
        self.store.apply_stat_updates(stats);
        let lr = self.schedule().lr_at(step);
        if lr > 0.0 {
            self.adam.step(&mut self.store, lr)?;
        }
        self.step += 1;
        Ok(row)
    }

    /// Trains until `until` steps are complete. With `out`, appends to
    /// `trace.csv` and writes `checkpoint.json` at every epoch boundary and
    /// at the end.
    pub fn run(&mut self, until: u64, out: Option<&Path>) -> Result<Vec<TraceRow>> {
        let mut trace_file = match out {
            Some(dir) => {
                fs::create_dir_all(dir)?;
                let path = dir.join("trace.csv");
                let fresh = self.step == 0 || !path.exists();
                let mut f = if fresh { File::create(&path)? } else { OpenOptions::new().append(true).open(&path)? };
                if fresh {
                    writeln!(f, "{TRACE_HEADER}")?;
                }
                Some(f)
            }
            None => None,
        };
        let dump: Option<PathBuf> = out.map(|d| d.join("nan_dump.json"));
        let mut rows = Vec::new();
        while self.step < until {
            let row = self.step_once(dump.as_deref())?;
            if let Some(f) = trace_file.as_mut() {
                writeln!(f, "{}", row.csv())?;
            }
            rows.push(row);
            if let Some(dir) = out {
                if self.step % self.steps_per_epoch() == 0 || self.step == until {
                    self.checkpoint().save(&dir.join("checkpoint.json"))?;
                }
            }
        }
        Ok(rows)
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub trainer: Trainer,
    pub trace: Vec<TraceRow>,
}

/// Full run from scratch, or from `resume` when given.
pub fn train(cfg: &Config, scenes: &[Scene], out: Option<&Path>, resume: Option<&Checkpoint>) -> Result<TrainOutcome> {
    let mut trainer = match resume {
        Some(c) => Trainer::resume(cfg, scenes, c)?,
        None => Trainer::new(cfg, scenes)?,
    };
    let until = trainer.total_steps();
    let trace = trainer.run(until, out)?;
    Ok(TrainOutcome { trainer, trace })
}

impl std::fmt::Debug for Trainer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Trainer").field("step", &self.step).field("params", &self.store.len()).finish()
    }
}
