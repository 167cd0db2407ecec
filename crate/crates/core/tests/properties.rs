use mafea_core::encoder::{alignment_scores, multi_head_attention};
use mafea_core::objectives::{partition_tokens, region_counts, region_masks, tbd_loss, PROB_CLAMP};
use mafea_core::relation::prototype_match;
use mafea_core::scenes::{density_from_points, generate_scene, scene_rng};
use mafea_core::{OptimConfig, SceneSpec};
use mafea_tensor::{Tape, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Softmax attention written out per row and head.
fn attention_oracle(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Tensor {
    let (a, c) = (q.shape()[0], q.shape()[1]);
    let b = k.shape()[0];
    let d = c / heads;
    let mut out = Tensor::zeros(&[a, c]);
    for h in 0..heads {
        for i in 0..a {
            let logits: Vec<f64> = (0..b)
                .map(|j| (0..d).map(|t| q.get(&[i, h * d + t]) * k.get(&[j, h * d + t])).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let z: f64 = e.iter().sum();
            for t in 0..d {
                let mut acc = 0.0;
                for j in 0..b {
                    acc += e[j] / z * v.get(&[j, h * d + t]);
                }
                out.set(&[i, h * d + t], acc);
            }
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn attention_matches_naive_softmax(a in 1usize..6, b in 1usize..6, heads in 1usize..4, d in 1usize..4, seed in 0u64..1000) {
        let c = heads * d;
        let (q, k, v) = (randn(&[a, c], seed), randn(&[b, c], seed + 1), randn(&[b, c], seed + 2));
        let mut tape = Tape::new();
        let (vq, vk, vv) = (tape.constant(q.clone()), tape.constant(k.clone()), tape.constant(v.clone()));
        let eye = tape.constant(Tensor::eye(c));
        let zero = tape.constant(Tensor::zeros(&[c]));
        let att = multi_head_attention(&mut tape, vq, vk, vv, heads, eye, zero).unwrap();
        let expect = attention_oracle(&q, &k, &v, heads);
        prop_assert!(tape.value(att.output).max_abs_diff(&expect) < 1e-12);
        for &w in &att.weights {
            for row in tape.value(w).data().chunks(b) {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn alignment_scores_lie_strictly_inside_unit_interval(nq in 1usize..8, ne in 1usize..10, heads in 1usize..3, scale in 0.01f64..5.0, seed in 0u64..1000) {
        let c = heads * 2;
        let mut tape = Tape::new();
        let q = tape.constant(randn(&[nq, c], seed).map(|x| x * scale));
        let ke = tape.constant(randn(&[ne, c], seed + 1));
        let kb = tape.constant(randn(&[1, c], seed + 2));
        let a = alignment_scores(&mut tape, q, ke, kb, heads).unwrap();
        prop_assert_eq!(tape.shape(a), &[nq][..]);
        for &v in tape.value(a).data() {
            prop_assert!(v > 0.0 && v < 1.0);
        }
    }

    #[test]
    fn tbd_loss_matches_token_loop(scores in prop::collection::vec(0.0f64..=1.0, 16), points in prop::collection::vec((0.0f64..32.0, 0.0f64..32.0), 0..6)) {
        let points: Vec<[f64; 2]> = points.into_iter().map(|(x, y)| [x, y]).collect();
        let part = partition_tokens(&points, 8, (4, 4)).unwrap();
        let mut tape = Tape::new();
        let s = tape.constant(Tensor::new(&[16], scores.clone()).unwrap());
        let l = tbd_loss(&mut tape, s, &part).unwrap();
        let clamp = |p: f64| p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        let mut acc = 0.0;
        for (i, &a) in scores.iter().enumerate() {
            acc += if part.is_positive(i) { -clamp(1.0 - a).ln() } else { -clamp(a).ln() };
        }
        prop_assert!((tape.value(l).item() - acc / 16.0).abs() < 1e-12);
    }

    #[test]
    fn partition_marks_exactly_the_point_cells(points in prop::collection::vec((0.0f64..40.0, 0.0f64..24.0), 0..10)) {
        let points: Vec<[f64; 2]> = points.into_iter().map(|(x, y)| [x, y]).collect();
        let part = partition_tokens(&points, 8, (3, 5)).unwrap();
        prop_assert_eq!(part.positive().len() + part.negative().len(), 15);
        for i in 0..15 {
            let hit = points.iter().any(|p| (p[1] / 8.0) as usize * 5 + (p[0] / 8.0) as usize == i);
            prop_assert_eq!(part.is_positive(i), hit);
        }
    }

    #[test]
    fn region_counts_split_total_mass(points in prop::collection::vec((0.0f64..32.0, 0.0f64..24.0), 0..8), bw in 1.0f64..9.0, bh in 1.0f64..9.0, seed in 0u64..1000) {
        let points: Vec<[f64; 2]> = points.into_iter().map(|(x, y)| [x, y]).collect();
        let masks = region_masks(&points, &[[bw, bh], [bw * 0.5, bh]], [24, 32]);
        prop_assert_eq!(masks.target_pixels() + masks.nontarget_pixels(), 24 * 32);
        for p in &points {
            let (x, y) = (p[0] as usize, p[1] as usize);
            if bw >= 2.0 && bh >= 2.0 {
                prop_assert!(masks.target[y * 32 + x]);
            }
        }
        let map = randn(&[1, 24, 32], seed).map(f64::abs);
        let (t, n) = region_counts(&map, &masks).unwrap();
        prop_assert!((t + n - map.sum()).abs() < 1e-9);
    }

    #[test]
    fn prototype_order_is_irrelevant(seed in 0u64..1000, m in 1usize..5, c in 1usize..5) {
        let map = randn(&[c, 5, 4], seed);
        let protos: Vec<Tensor> = (0..m).map(|i| randn(&[9, c], seed + 10 + i as u64)).collect();
        let run = |rev: bool| {
            let mut tape = Tape::new();
            let vm = tape.constant(map.clone());
            let mut rows: Vec<_> = protos.iter().map(|p| tape.constant(p.clone())).collect();
            if rev {
                rows.reverse();
            }
            let stacked = tape.concat_rows(&rows).unwrap();
            let out = prototype_match(&mut tape, vm, stacked, 3).unwrap();
            tape.value(out).clone()
        };
        prop_assert_eq!(run(false), run(true));
    }

    #[test]
    fn lr_schedule_halves_exactly(lr in 1e-6f64..1.0, every in 1usize..50, epoch in 0usize..400) {
        let cfg = OptimConfig { lr, halve_every: every, ..OptimConfig::desk() };
        prop_assert_eq!(cfg.lr_at(epoch), lr * 0.5f64.powi((epoch / every) as i32));
    }

    #[test]
    fn density_mass_equals_point_count(points in prop::collection::vec((6.0f64..58.0, 6.0f64..58.0), 0..12), sigma in 0.5f64..2.5) {
        let points: Vec<[f64; 2]> = points.into_iter().map(|(x, y)| [x, y]).collect();
        let d = density_from_points(&points, [64, 64], sigma);
        prop_assert!((d.sum() - points.len() as f64).abs() < 1e-9);
        prop_assert!(d.data().iter().all(|&v| v >= 0.0));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn scenes_are_reproducible_and_consistent(seed in 0u64..10_000, index in 0u64..64) {
        let spec = SceneSpec::desk();
        let a = generate_scene(&spec, &mut scene_rng(seed, index)).unwrap();
        let b = generate_scene(&spec, &mut scene_rng(seed, index)).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert!((a.density.sum() - a.count() as f64).abs() < 1e-9);
        prop_assert!(a.count() >= spec.target_count[0] && a.count() <= spec.target_count[1]);
        prop_assert_eq!(a.exemplars.len(), spec.exemplars);
        prop_assert_eq!(a.boxes.len(), spec.exemplars);
        prop_assert!(a.nontarget_points.len() as f64 >= spec.min_nontarget_ratio * a.count() as f64);
        prop_assert_ne!(a.target_class, a.distractor_class);
        prop_assert!(a.query.all_finite());
    }
}
