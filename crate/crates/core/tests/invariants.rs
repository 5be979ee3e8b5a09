//! Property tests of composition, losses and metrics on the reference tree.

use hierseg::composition::{
    compose_pyramid, conditional_softmax, restrict_pyramid, CompositionConfig, HierarchyLayout, ProbPyramid,
};
use hierseg::dataprep::{mask_to_hier_targets, LossWeights, SemanticMask};
use hierseg::hierarchy::tl_pano_tree;
use hierseg::losses::{consistency_loss, hier_ce, hier_dice, whl, CeMode, CeReduction, LossConfig};
use hierseg::metrics::{confusion, EmptyPolicy};
use ndarray::{s, Array2, Array3, Axis};
use proptest::prelude::*;

const H: usize = 3;
const W: usize = 4;

fn logits_strategy() -> impl Strategy<Value = Vec<Array3<f64>>> {
    let tree = tl_pano_tree();
    let sizes: Vec<usize> = (0..tree.depth()).map(|l| tree.level_size(l)).collect();
    let total: usize = sizes.iter().sum::<usize>() * H * W;
    proptest::collection::vec(-6.0f64..6.0, total).prop_map(move |flat| {
        let mut offset = 0;
        sizes
            .iter()
            .map(|&k| {
                let n = k * H * W;
                let a = Array3::from_shape_vec((k, H, W), flat[offset..offset + n].to_vec()).unwrap();
                offset += n;
                a
            })
            .collect()
    })
}

fn mask_strategy() -> impl Strategy<Value = SemanticMask> {
    // Stored TL-pano leaves.
    proptest::collection::vec(prop::sample::select(vec![0u8, 1, 2, 4, 5, 6, 7]), H * W)
        .prop_map(|v| SemanticMask::new(Array2::from_shape_vec((H, W), v).unwrap()))
}

fn max_abs_diff(a: &Array3<f64>, b: &Array3<f64>) -> f64 {
    (a - b).iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn composed_children_sum_to_their_parent(logits in logits_strategy()) {
        let tree = tl_pano_tree();
        let layout = HierarchyLayout::from_tree(&tree);
        let pyramid = compose_pyramid(&logits, &layout, &CompositionConfig::default());
        for p in &pyramid.probs {
            prop_assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
        }
        for level in 1..layout.depth() {
            for g in &layout.levels[level].groups {
                for y in 0..H {
                    for x in 0..W {
                        let sum: f64 = g.children.iter().map(|&c| pyramid.probs[level][[c, y, x]]).sum();
                        prop_assert!((sum - pyramid.probs[level - 1][[g.parent, y, x]]).abs() < 1e-12);
                    }
                }
            }
        }
        prop_assert!(consistency_loss(&pyramid.probs, &layout) < 1e-12);
    }

    #[test]
    fn conditional_softmax_ignores_group_shifts(
        z in proptest::collection::vec(-8.0f64..8.0, 3 * H * W),
        parent in proptest::collection::vec(0.0f64..1.0, H * W),
        shift in -20.0f64..20.0,
    ) {
        let z = Array3::from_shape_vec((3, H, W), z).unwrap();
        let parent = Array2::from_shape_vec((H, W), parent).unwrap();
        let q = conditional_softmax(z.view(), parent.view(), 1e-6);
        let shifted = conditional_softmax((&z + shift).view(), parent.view(), 1e-6);
        prop_assert!(max_abs_diff(&q, &shifted) < 1e-12);
        // The parent map does not change the conditional distribution.
        let other = conditional_softmax(z.view(), parent.mapv(|p| 1.0 - p).view(), 1e-6);
        prop_assert!(max_abs_diff(&q, &other) < 1e-12);
    }

    #[test]
    fn conditional_softmax_is_permutation_equivariant(
        z in proptest::collection::vec(-8.0f64..8.0, 3 * H * W),
        perm in Just(vec![0usize, 1, 2]).prop_shuffle(),
    ) {
        let z = Array3::from_shape_vec((3, H, W), z).unwrap();
        let parent = Array2::from_elem((H, W), 0.7);
        let q = conditional_softmax(z.view(), parent.view(), 1e-6);
        let zp = z.select(Axis(0), &perm);
        let qp = conditional_softmax(zp.view(), parent.view(), 1e-6);
        prop_assert!(max_abs_diff(&q.select(Axis(0), &perm), &qp) < 1e-12);
    }

    #[test]
    fn restriction_is_idempotent(logits in logits_strategy()) {
        let layout = HierarchyLayout::from_tree(&tl_pano_tree());
        let pyramid = compose_pyramid(&logits, &layout, &CompositionConfig::default());
        let once = restrict_pyramid(&pyramid, &layout, 0.5);
        let again = restrict_pyramid(
            &ProbPyramid { logits: once.logits.clone(), q: pyramid.q.clone(), probs: once.probs.clone() },
            &layout,
            0.5,
        );
        prop_assert_eq!(&once.probs, &again.probs);
        prop_assert_eq!(&once.gates, &again.gates);
    }

    #[test]
    fn whl_is_invariant_to_pixel_permutations(
        logits in logits_strategy(),
        mask in mask_strategy(),
        binary in any::<bool>(),
        mean in any::<bool>(),
    ) {
        let tree = tl_pano_tree();
        let layout = HierarchyLayout::from_tree(&tree);
        let probs = compose_pyramid(&logits, &layout, &CompositionConfig::default()).probs;
        let targets = mask_to_hier_targets(&mask, &tree).unwrap();
        let weights = LossWeights {
            levels: (0..tree.depth())
                .map(|l| (0..tree.level_size(l)).map(|c| 0.5 + 0.25 * c as f64).collect())
                .collect(),
        };
        let config = LossConfig {
            ce_mode: if binary { CeMode::Binary } else { CeMode::Positive },
            ce_reduction: if mean { CeReduction::Mean } else { CeReduction::Sum },
            ..LossConfig::default()
        };
        let flip = |a: &Array3<f64>| a.slice(s![.., ..;-1, ..;-1]).to_owned();
        let flipped_mask = SemanticMask::new(mask.data().slice(s![..;-1, ..;-1]).to_owned());
        let flipped_targets = mask_to_hier_targets(&flipped_mask, &tree).unwrap();
        let flipped: Vec<Array3<f64>> = probs.iter().map(flip).collect();
        let a = whl(&probs, &targets, &weights, &config).unwrap();
        let b = whl(&flipped, &flipped_targets, &weights, &config).unwrap();
        for (la, lb) in a.iter().zip(&b) {
            prop_assert!((la.dice - lb.dice).abs() < 1e-9);
            prop_assert!((la.ce - lb.ce).abs() < 1e-9 * la.ce.abs().max(1.0));
        }

        for (level, p) in probs.iter().enumerate() {
            let y = targets.level(level);
            let w = weights.level(level);
            // Cross-entropy is linear in the class weights; the weights cancel inside each Dice ratio.
            let doubled: Vec<f64> = w.iter().map(|v| 2.0 * v).collect();
            let single = hier_ce(p.view(), y, w, &config);
            let double = hier_ce(p.view(), y, &doubled, &config);
            prop_assert!((double - 2.0 * single).abs() < 1e-9 * single.abs().max(1.0));
            let dice = hier_dice(p.view(), y, w, 0.0);
            if dice.is_finite() {
                prop_assert!((hier_dice(p.view(), y, &doubled, 0.0) - dice).abs() < 1e-12);
            }

            // Permuting classes, targets and weights together leaves both terms unchanged.
            let perm: Vec<usize> = (0..w.len()).rev().collect();
            let pw: Vec<f64> = perm.iter().map(|&c| w[c]).collect();
            let pp = p.select(Axis(0), &perm);
            let py = y.select(Axis(0), &perm);
            let ce = hier_ce(pp.view(), py.view(), &pw, &config);
            prop_assert!((ce - single).abs() < 1e-9 * single.abs().max(1.0));
            let d1 = hier_dice(p.view(), y, w, 1e-6);
            prop_assert!((hier_dice(pp.view(), py.view(), &pw, 1e-6) - d1).abs() < 1e-12);
        }
    }

    #[test]
    fn scores_match_set_definitions(
        pred in proptest::collection::vec(any::<bool>(), H * W),
        target in proptest::collection::vec(any::<bool>(), H * W),
    ) {
        let p = Array2::from_shape_vec((H, W), pred.clone()).unwrap();
        let t = Array2::from_shape_vec((H, W), target.clone()).unwrap();
        let c = confusion(p.view(), t.view());
        prop_assert_eq!(c.total(), (H * W) as u64);
        let inter = pred.iter().zip(&target).filter(|(a, b)| **a && **b).count() as f64;
        let union = pred.iter().zip(&target).filter(|(a, b)| **a || **b).count() as f64;
        let (np, nt) = (pred.iter().filter(|v| **v).count() as f64, target.iter().filter(|v| **v).count() as f64);
        let scores = c.scores(EmptyPolicy::One).unwrap();
        if union == 0.0 {
            prop_assert_eq!(scores.iou, 1.0);
            prop_assert!(c.scores(EmptyPolicy::Skip).is_none());
        } else {
            prop_assert!((scores.iou - inter / union).abs() < 1e-15);
            prop_assert!((scores.dice - 2.0 * inter / (np + nt)).abs() < 1e-15);
            prop_assert!((scores.dice - 2.0 * scores.iou / (1.0 + scores.iou)).abs() < 1e-12);
        }
    }
}
