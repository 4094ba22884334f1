mod support;

use proptest::prelude::*;
use refpose::autograd::Tape;
use refpose::eval::{ap_eval, oks, EvalParams, Prediction, SigmaTable};
use refpose::geometry::BoundingBox;
use refpose::head::{encode_targets, keypoint_loss, LossKind};
use refpose::keypoints::{Keypoint, KeypointSet, Visibility};
use refpose::Tensor;

#[test]
fn ap_matches_exhaustive_oracle() {
    let (n, bad) = support::ap_oracle_equivalence(300);
    assert_eq!(n, 300);
    assert!(bad.is_empty(), "scenes {bad:?} differ");
}

fn single(x: f64, y: f64) -> KeypointSet {
    KeypointSet(std::array::from_fn(|k| {
        if k == 0 {
            Keypoint::labeled(x, y, Visibility::Visible)
        } else {
            Keypoint::default()
        }
    }))
}

#[test]
fn oks_analytic_cases() {
    let s = SigmaTable::constant(0.1);
    let gt = single(10.0, 10.0);
    assert!((oks(&gt, &gt, 400.0, &s).unwrap() - 1.0).abs() < 1e-9);
    // d² = 2·area·κ² gives e⁻¹.
    let d = (2.0f64 * 400.0 * 0.01).sqrt();
    assert!((oks(&single(10.0 + d, 10.0), &gt, 400.0, &s).unwrap() - (-1.0f64).exp()).abs() < 1e-9);
    assert!(oks(&single(1e4, 1e4), &gt, 400.0, &s).unwrap() < 1e-9);
}

#[test]
fn uniform_logits_cost_log_of_heatmap_cells() {
    let b = BoundingBox::new(0.0, 0.0, 56.0, 56.0).unwrap();
    let kps = KeypointSet([Keypoint::labeled(20.5, 30.5, Visibility::Visible); 17]);
    let t = encode_targets(&kps, &b, (56, 56));
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::zeros(&[17, 56, 56]));
    let loss = keypoint_loss(&mut tape, x, &t, LossKind::CrossEntropy).unwrap();
    assert!((tape.value(loss.value).data()[0] - 3136f64.ln()).abs() < 1e-6);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ap_is_bounded_and_order_free(seed in 0u64..10_000, rot in 0usize..7) {
        let (mut preds, gts) = support::random_scene(seed);
        let p = EvalParams::default();
        let a = ap_eval(&preds, &gts, &p).unwrap();
        for v in a.ap_per_threshold.iter().chain([&a.ap_mean, &a.ap_medium, &a.ap_large, &a.pck]) {
            prop_assert!((0.0..=1.0).contains(v));
        }
        let len = preds.len().max(1);
        preds.rotate_left(rot % len);
        let b = ap_eval(&preds, &gts, &p).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn ground_truth_submitted_as_predictions_scores_one(seed in 0u64..10_000) {
        let (_, gts) = support::random_scene(seed);
        let preds: Vec<Prediction> = gts.iter().map(|g| Prediction {
            image_id: g.image_id, id: g.id, keypoints: g.keypoints, score: 1.0, area: g.area,
        }).collect();
        let r = ap_eval(&preds, &gts, &EvalParams::default()).unwrap();
        prop_assert_eq!(r.ap_mean, 1.0);
        prop_assert_eq!(r.pck, 1.0);
        prop_assert!(r.per_keypoint_miss_rate.iter().all(|&m| m == 0.0));
    }
}
