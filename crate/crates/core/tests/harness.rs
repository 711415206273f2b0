use std::ops::Range;

use rfe3d::config::Config;
use rfe3d::harness::{gen_scene, gen_scenes, jitter_proposals, train, Trainer};
use rfe3d::heads::focal_floor;
use rfe3d::tensor::nn::Ctx;
use rfe3d::voxel::scene::Scene;
use rfe3d::voxel::voxelize;

/// Mean refine loss over the batches of `steps`, and the mean of its
/// attainable minimum (the focal floor of each soft confidence target).
fn refine_loss_and_floor(t: &Trainer, scenes: &[Scene], steps: Range<u64>) -> (f64, f64) {
    let refine = t.cfg.model.refine;
    let (mut loss, mut floor) = (0.0, 0.0);
    for s in steps.clone() {
        let (si, rois, seed) = t.step_inputs(s);
        let gts = scenes[si].gt_rois().unwrap();
        let occ = voxelize(&scenes[si].points, &t.cfg.model.grid);
        let keys: Vec<u64> = (0..rois.len() as u64).collect();
        let mut ctx = Ctx::new(&t.store, false);
        let (terms, targets) = t.model.loss(&mut ctx, &occ, &rois, &keys, &gts, seed).unwrap();
        loss += ctx.tape.value(terms.refine.unwrap()).data()[0];
        floor += targets.confidence.iter().map(|&c| focal_floor(c, refine.focal_alpha, refine.focal_gamma)).sum::<f64>()
            / targets.confidence.len() as f64;
    }
    let n = (steps.end - steps.start) as f64;
    (loss / n, floor / n)
}

/// Soft confidence targets put a positive floor under the focal term, so
/// the smoke run asks for half of the loss above that floor to be gone.
#[test]
fn smoke_run_halves_refine_loss_above_its_floor() {
    let mut cfg = Config::desk();
    cfg.train.steps = 300;
    let scenes = gen_scenes(&cfg.scene, cfg.seed, 10).unwrap();
    let (before, floor_before) = refine_loss_and_floor(&Trainer::new(&cfg, &scenes).unwrap(), &scenes, 0..10);
    let out = train(&cfg, &scenes, None, None).unwrap();
    assert_eq!(out.trace.len(), 300);
    let (after, floor_after) = refine_loss_and_floor(&out.trainer, &scenes, 0..10);
    assert!(floor_before == floor_after, "targets depend only on the batch");
    let drop = 1.0 - (after - floor_after) / (before - floor_before);
    assert!(drop >= 0.5, "excess loss {:.4} -> {:.4} (drop {drop:.3})", before - floor_before, after - floor_after);
}

#[test]
fn identical_seeds_give_bit_identical_parameters() {
    let mut cfg = Config::tiny();
    cfg.train.steps = 6;
    let scenes = gen_scenes(&cfg.scene, 4, 3).unwrap();
    let a = train(&cfg, &scenes, None, None).unwrap();
    let b = train(&cfg, &scenes, None, None).unwrap();
    let params = |t: &Trainer| t.store.ids().map(|id| t.store.value(id).data().to_vec()).collect::<Vec<_>>();
    assert_eq!(params(&a.trainer), params(&b.trainer));
    assert_eq!(a.trace, b.trace);

    cfg.seed += 1;
    let c = train(&cfg, &scenes, None, None).unwrap();
    assert_ne!(params(&a.trainer), params(&c.trainer));
}

#[test]
fn scene_and_proposal_generation_are_seeded() {
    let cfg = Config::desk();
    for seed in 0..20 {
        let scene = gen_scene(&cfg.scene, seed).unwrap();
        assert_eq!(scene, gen_scene(&cfg.scene, seed).unwrap());
        let gts = scene.gt_rois().unwrap();
        for (i, a) in gts.iter().enumerate() {
            for b in &gts[i + 1..] {
                assert_eq!(rfe3d::geometry::bev_iou(a, b).unwrap(), 0.0, "boxes overlap in seed {seed}");
            }
        }
        assert_eq!(jitter_proposals(&gts, &cfg.jitter, seed), jitter_proposals(&gts, &cfg.jitter, seed));
    }
}
