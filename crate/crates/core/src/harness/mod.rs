//! Desk-scale experiment plumbing: synthetic scenes, jittered proposals,
//! training, evaluation, benchmarks, gradient checks and ablations.

pub mod ablate;
pub mod bench;
pub mod eval;
pub mod gradcheck;
pub mod jitter;
pub mod scenes;
pub mod train;

pub use ablate::{ablate, AblationReport, AblationRow};
pub use bench::{attention_bytes, bench, BenchConfig, BenchRow};
pub use eval::{average_precision, evaluate, interpolated_ap40, precision_recall, CalibrationBin, EvalConfig, EvalReport};
pub use gradcheck::{gradcheck_config, run_gradcheck, GRADCHECK_TOL};
pub use jitter::{jitter_proposals, sample_training_rois, ProposalJitter};
pub use scenes::{gen_scene, gen_scene_counted, gen_scenes, load_scenes, write_scenes, ClassPrior, SceneSpec, CLASS_NAMES};
pub use train::{train, Schedule, TraceRow, TrainConfig, TrainOutcome, Trainer};

use crate::rfe::pool::splitmix;

/// Derives an independent stream seed from a parent seed and a label.
pub fn mix(seed: u64, label: u64) -> u64 {
    splitmix(splitmix(seed) ^ label)
}
