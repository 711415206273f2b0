mod common;

use std::sync::Arc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rfe3d::geometry::{Point3, Roi};
use rfe3d::rfe::{augmented_coord, pool_candidates, subsample, AttentionKind, AttentionParams, AUGMENTED_DIM};
use rfe3d::tensor::nn::{Ctx, Mlp, ParamStore};
use rfe3d::tensor::{Segments, Tensor};

use common::inside_half_spaces;

fn roi() -> impl Strategy<Value = Roi> {
    (prop::array::uniform3(-5.0f64..5.0), prop::array::uniform3(0.5f64..4.0), -3.1f64..3.1)
        .prop_map(|(c, s, yaw)| Roi::new(c, s, yaw, 0).unwrap())
}

fn random_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::new((0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect(), vec![rows, cols]).unwrap()
}

/// Attention weights for one query over `f`, `z`.
fn weights(store: &ParamStore, attn: &AttentionParams, r: &Tensor, f: &Tensor, z: &Tensor) -> Tensor {
    let mut ctx = Ctx::new(store, false);
    let (rv, fv, zv) = (ctx.tape.constant(r.clone()), ctx.tape.constant(f.clone()), ctx.tape.constant(z.clone()));
    let segs = Arc::new(Segments::from_counts(&[f.shape()[0]]));
    let out = attn.forward(&mut ctx, rv, fv, zv, &segs).unwrap();
    ctx.tape.value(out.weights).clone()
}

proptest! {
    #[test]
    fn pooled_points_lie_in_the_enlarged_box(
        r in roi(),
        enl in prop::array::uniform3(0.0f64..1.0),
        budget in 1usize..40,
        seed: u64,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts: Vec<Point3> = (0..400).map(|_| [0, 1, 2].map(|k| r.center[k] + rng.random_range(-3.0..3.0))).collect();
        let set = subsample(&pool_candidates(&pts, &r, enl), budget, seed);
        prop_assert!(set.len() <= budget);
        prop_assert!(set.indices.windows(2).all(|w| w[0] < w[1]));
        for (&i, q) in set.indices.iter().zip(&set.canonical) {
            prop_assert!(inside_half_spaces(pts[i], &r, [enl[0] + 1e-9, enl[1] + 1e-9, enl[2] + 1e-9]));
            prop_assert!((0..3).all(|k| q[k].abs() <= (r.size[k] + enl[k]) / 2.0));
        }
    }

    #[test]
    fn augmented_coordinate_lists_vertex_displacements(r in roi(), q in prop::array::uniform3(-3.0f64..3.0)) {
        let a = augmented_coord(q, &r);
        prop_assert_eq!(a.len(), AUGMENTED_DIM);
        prop_assert_eq!(&a[..3], &q[..]);
        // Vertex k, recovered independently in the canonical frame from the
        // LiDAR-frame corners.
        let lidar = r.vertices_lidar();
        for k in 0..8 {
            let vk = common::local(lidar.get(k), &r);
            for axis in 0..3 {
                prop_assert!((a[3 + 3 * k + axis] - (q[axis] - vk[axis])).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn multihead_weights_sum_to_one_per_head(n in 1usize..20, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let attn = AttentionParams::new(&mut store, "a", AttentionKind::Multihead, 8, 8, 4, &mut rng).unwrap();
        let w = weights(&store, &attn, &random_rows(&mut rng, 1, 8), &random_rows(&mut rng, n, 8), &random_rows(&mut rng, n, 8));
        prop_assert_eq!(w.shape(), &[n, 4]);
        for h in 0..4 {
            let s: f64 = (0..n).map(|j| w.row(j)[h]).sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn with_identity_relation_a_channel_edit_moves_only_its_weight_column() {
    let d = 6;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut store = ParamStore::new();
    let mut attn = AttentionParams::new(&mut store, "a", AttentionKind::Vector, d, 12, 1, &mut rng).unwrap();
    attn.gamma = Mlp::identity();
    // Key projection reduced to the identity so feature channel c reaches
    // only relation channel c.
    let psi = store.value_mut(attn.psi.weight);
    psi.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v = if i / d == i % d { 1.0 } else { 0.0 });
    store.value_mut(attn.psi.bias).data_mut().fill(0.0);

    let r = random_rows(&mut rng, 1, d);
    let f = random_rows(&mut rng, 2, d);
    let z = random_rows(&mut rng, 2, d);
    let base = weights(&store, &attn, &r, &f, &z);
    for c in 0..d {
        for edit_zeta in [false, true] {
            let (mut f2, mut z2) = (f.clone(), z.clone());
            let target = if edit_zeta { &mut z2 } else { &mut f2 };
            target.data_mut()[d + c] += 0.7;
            let moved = weights(&store, &attn, &r, &f2, &z2);
            for j in 0..2 {
                for k in 0..d {
                    let same = moved.row(j)[k] == base.row(j)[k];
                    assert_eq!(same, k != c, "point {j} channel {k} after editing channel {c}");
                }
            }
        }
    }
}
