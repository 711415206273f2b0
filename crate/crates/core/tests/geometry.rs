mod common;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rfe3d::geometry::{bev_iou, iou_3d, nms_indices, Point3, RigidMotion, Roi};

use common::{crowded_boxes, inside_half_spaces, monte_carlo_iou, naive_nms, overlapping_pair};

fn roi() -> impl Strategy<Value = Roi> {
    (prop::array::uniform3(-20.0f64..20.0), prop::array::uniform3(0.2f64..6.0), -3.1f64..3.1)
        .prop_map(|(c, s, yaw)| Roi::new(c, s, yaw, 0).unwrap())
}

fn motion() -> impl Strategy<Value = RigidMotion> {
    (-3.1f64..3.1, prop::array::uniform3(-50.0f64..50.0)).prop_map(|(yaw, translation)| RigidMotion { yaw, translation })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn iou_agrees_with_sampling(seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a, b) = overlapping_pair(&mut rng);
        let mc = monte_carlo_iou(&a, &b, 200_000, &mut rng);
        prop_assert!((iou_3d(&a, &b).unwrap() - mc).abs() < 0.01);
    }
}

proptest! {
    #[test]
    fn iou_is_invariant_under_joint_rigid_motion(a in roi(), b in roi(), m in motion()) {
        let before = iou_3d(&a, &b).unwrap();
        let after = iou_3d(&m.apply_roi(&a), &m.apply_roi(&b)).unwrap();
        prop_assert!((before - after).abs() < 1e-9);
    }

    #[test]
    fn iou_is_bounded_by_bev_overlap_and_self_iou_is_one(a in roi(), b in roi()) {
        let v = iou_3d(&a, &b).unwrap();
        prop_assert!((0.0..=1.0).contains(&v));
        prop_assert!((iou_3d(&a, &a).unwrap() - 1.0).abs() < 1e-9);
        if bev_iou(&a, &b).unwrap() == 0.0 {
            prop_assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn nms_matches_quadratic_oracle(seed: u64, n in 0usize..60, thr in 0.01f64..0.9, max_keep in 1usize..70) {
        let boxes = crowded_boxes(n, &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(nms_indices(&boxes, thr, max_keep).unwrap(), naive_nms(&boxes, thr, max_keep));
    }

    #[test]
    fn nms_depends_only_on_confidence_order(seed: u64, scale in 0.01f64..100.0, thr in 0.05f64..0.8) {
        let boxes = crowded_boxes(40, &mut ChaCha8Rng::seed_from_u64(seed));
        let scaled: Vec<Roi> = boxes.iter().map(|b| b.with_confidence(scale * b.confidence + 1.0)).collect();
        prop_assert_eq!(nms_indices(&boxes, thr, 40).unwrap(), nms_indices(&scaled, thr, 40).unwrap());
    }

    #[test]
    fn canonical_frame_matches_independent_projection(r in roi(), p in prop::array::uniform3(-30.0f64..30.0)) {
        let want = common::local(p, &r);
        let got = r.to_canonical(p);
        prop_assert!((0..3).all(|k| (want[k] - got[k]).abs() < 1e-12));
    }
}

#[test]
fn contains_agrees_with_half_spaces() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..20 {
        let (roi, _) = overlapping_pair(&mut rng);
        let enl: Point3 = [0, 1, 2].map(|_| rng.random_range(0.0..1.0));
        let mut inside = 0;
        for _ in 0..10_000 {
            let q: Point3 = [0, 1, 2].map(|k| rng.random_range(-0.8..0.8) * (roi.size[k] + enl[k]));
            let p = roi.from_canonical(q);
            let got = roi.contains(p, enl);
            inside += usize::from(got);
            // Points within 1e-9 of a face may go either way under rounding.
            let margin = (0..3).map(|k| ((roi.size[k] + enl[k]) / 2.0 - q[k].abs()).abs()).fold(f64::MAX, f64::min);
            if margin > 1e-9 {
                assert_eq!(got, inside_half_spaces(p, &roi, enl), "{p:?} in {roi:?}");
            }
        }
        assert!(inside > 1000 && inside < 9000, "{inside}");
    }
}
