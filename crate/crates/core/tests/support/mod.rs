//! Checks shared by the integration tests and the acceptance runner.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use refpose::autograd::{grad_check, Tape, Var};
use refpose::eval::{EvalParams, GroundTruth, Prediction, SigmaTable, AreaRange, OKS_THRESHOLDS};
use refpose::geometry::{enlarge_box, roi_align, roi_align_var, BoundingBox, RoiAlignSpec};
use refpose::head::{
    encode_targets, influence_of_pixel, keypoint_loss, measured_extent, positive_probe_params, GcmBlock, HeadConfig, HeadVariant,
    KeypointHead, LossKind,
};
use refpose::keypoints::{Keypoint, KeypointSet, Visibility, NUM_KEYPOINTS};
use refpose::params::{Graph, ParamSet};
use refpose::Tensor;

pub const GRAD_EPSILON: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-6;
pub const GRAD_TOL_HEAD: f64 = 1e-5;
pub const GRAD_SEEDS: u64 = 5;

pub struct GradResult {
    pub op: &'static str,
    pub worst: f64,
    pub tolerance: f64,
}

impl GradResult {
    pub fn passed(&self) -> bool {
        self.worst < self.tolerance
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `grad_check` of `Σ probe ⊙ (y(x) − y(x₀))`. Subtracting the constant
/// output at the base point keeps the objective near zero, so its rounding
/// does not swamp small gradient components.
fn check_centered<F>(f: F, point: &Tensor, probe: &Tensor) -> f64
where
    F: Fn(&mut Tape, Var) -> refpose::Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.leaf(point.clone());
    let y = f(&mut tape, x).unwrap();
    let base = tape.value(y).scale(-1.0);
    grad_check(
        |t, xv| {
            let y = f(t, xv)?;
            let b = t.leaf(base.clone());
            let d = t.add(y, b)?;
            let p = t.leaf(probe.clone());
            let m = t.mul(d, p)?;
            Ok(t.sum(m))
        },
        point,
        GRAD_EPSILON,
    )
    .unwrap()
}

fn worst_over_seeds(f: impl Fn(u64) -> f64) -> f64 {
    (0..GRAD_SEEDS).map(f).fold(0.0, f64::max)
}

fn conv2d_check(seed: u64) -> f64 {
    let mut r = rng(seed);
    let x = Tensor::rand_uniform(&[3, 6, 5], -1.0, 1.0, &mut r);
    let w = Tensor::rand_uniform(&[4, 3, 3, 3], -0.5, 0.5, &mut r);
    let b = Tensor::rand_uniform(&[4], -0.5, 0.5, &mut r);
    let stride = 1 + (seed as usize % 2);
    let (oh, ow) = ((6 + 2 - 3) / stride + 1, (5 + 2 - 3) / stride + 1);
    let probe = Tensor::rand_uniform(&[4, oh, ow], -1.0, 1.0, &mut r);
    let wrt_x = check_centered(
        |t, xv| {
            let (wv, bv) = (t.leaf(w.clone()), t.leaf(b.clone()));
            t.conv2d(xv, wv, bv, stride, 1)
        },
        &x,
        &probe,
    );
    let wrt_w = check_centered(
        |t, wv| {
            let (xv, bv) = (t.leaf(x.clone()), t.leaf(b.clone()));
            t.conv2d(xv, wv, bv, stride, 1)
        },
        &w,
        &probe,
    );
    let wrt_b = check_centered(
        |t, bv| {
            let (xv, wv) = (t.leaf(x.clone()), t.leaf(w.clone()));
            t.conv2d(xv, wv, bv, stride, 1)
        },
        &b,
        &probe,
    );
    wrt_x.max(wrt_w).max(wrt_b)
}

fn conv_transpose2d_check(seed: u64) -> f64 {
    let mut r = rng(seed);
    let x = Tensor::rand_uniform(&[3, 4, 3], -1.0, 1.0, &mut r);
    let w = Tensor::rand_uniform(&[3, 2, 4, 4], -0.5, 0.5, &mut r);
    let b = Tensor::rand_uniform(&[2], -0.5, 0.5, &mut r);
    let out = refpose::tensor::ops::conv_transpose2d(&x, &w, &b, 2).unwrap();
    let probe = Tensor::rand_uniform(out.shape(), -1.0, 1.0, &mut r);
    let wrt_x = check_centered(
        |t, xv| {
            let (wv, bv) = (t.leaf(w.clone()), t.leaf(b.clone()));
            t.conv_transpose2d(xv, wv, bv, 2)
        },
        &x,
        &probe,
    );
    let wrt_w = check_centered(
        |t, wv| {
            let (xv, bv) = (t.leaf(x.clone()), t.leaf(b.clone()));
            t.conv_transpose2d(xv, wv, bv, 2)
        },
        &w,
        &probe,
    );
    wrt_x.max(wrt_w)
}

fn softmax_spatial_check(seed: u64) -> f64 {
    let mut r = rng(seed);
    let x = Tensor::rand_uniform(&[3, 5, 4], -3.0, 3.0, &mut r);
    let probe = Tensor::rand_uniform(&[3, 5, 4], -1.0, 1.0, &mut r);
    check_centered(
        |t, xv| {
            t.softmax_spatial(xv)
        },
        &x,
        &probe,
    )
}

fn bilinear_upsample_check(seed: u64) -> f64 {
    let mut r = rng(seed);
    let x = Tensor::rand_uniform(&[2, 4, 3], -1.0, 1.0, &mut r);
    let factor = 2 + seed as usize % 2;
    let probe = Tensor::rand_uniform(&[2, 4 * factor, 3 * factor], -1.0, 1.0, &mut r);
    check_centered(
        |t, xv| {
            t.bilinear_upsample(xv, factor)
        },
        &x,
        &probe,
    )
}

fn roi_align_check(seed: u64) -> f64 {
    let mut r = rng(seed);
    let f = Tensor::rand_uniform(&[2, 7, 8], -1.0, 1.0, &mut r);
    let x1 = r.gen_range(-6.0..10.0);
    let y1 = r.gen_range(-6.0..10.0);
    let b = BoundingBox::new(x1, y1, x1 + r.gen_range(6.0..24.0), y1 + r.gen_range(6.0..24.0)).unwrap();
    let spec = RoiAlignSpec::new(0.25, (3, 4), 2);
    let probe = Tensor::rand_uniform(&[2, 3, 4], -1.0, 1.0, &mut r);
    check_centered(
        |t, fv| {
            roi_align_var(t, fv, &b, &spec)
        },
        &f,
        &probe,
    )
}

fn gcm_block(seed: u64) -> (ParamSet, GcmBlock) {
    let mut p = ParamSet::new();
    let b = GcmBlock::new(&mut p, "gcm", 4, 2, (3, 4), &mut rng(100 + seed)).unwrap();
    (p, b)
}

/// The attention layer alone, or the whole block.
fn gcm_check(seed: u64, full_block: bool) -> f64 {
    let (p, block) = gcm_block(seed);
    let mut r = rng(seed);
    let x = Tensor::rand_uniform(&[4, 3, 4], -1.0, 1.0, &mut r);
    let probe = Tensor::rand_uniform(&[4, 3, 4], -1.0, 1.0, &mut r);
    check_centered(
        |t: &mut Tape, xv| {
            let mut g = Graph::with_tape(&p, std::mem::take(t));
            let y = if full_block { block.forward(&mut g, xv)? } else { block.mhsa(&mut g, xv)?.output };
            *t = g.into_tape();
            Ok(y)
        },
        &x,
        &probe,
    )
}

/// Small head: 4 input channels, 4×4 RoI, 8×8 heatmaps.
pub fn small_head(variant: HeadVariant, seed: u64) -> (ParamSet, KeypointHead) {
    let mut p = ParamSet::new();
    let cfg = HeadConfig {
        variant,
        head_channels: 4,
        heads: 2,
        heatmap_size: (8, 8),
        loss: LossKind::CrossEntropy,
    };
    let head = KeypointHead::new(&mut p, &cfg, 4, 4, &mut rng(200 + seed)).unwrap();
    (p, head)
}

fn head_loss_check(seed: u64, variant: HeadVariant) -> f64 {
    let (p, head) = small_head(variant, seed);
    let mut r = rng(seed);
    let x = Tensor::rand_uniform(&[4, 4, 4], -1.0, 1.0, &mut r);
    let b = BoundingBox::new(0.0, 0.0, 16.0, 16.0).unwrap();
    let kps = KeypointSet(std::array::from_fn(|k| {
        if k == 3 {
            Keypoint::default()
        } else {
            Keypoint::labeled(r.gen_range(0.5..15.5), r.gen_range(0.5..15.5), Visibility::Visible)
        }
    }));
    let targets = encode_targets(&kps, &b, (8, 8));
    check_centered(
        |t: &mut Tape, xv| {
            let mut g = Graph::with_tape(&p, std::mem::take(t));
            let logits = head.forward(&mut g, xv)?;
            let mut tape = g.into_tape();
            let loss = keypoint_loss(&mut tape, logits, &targets, LossKind::CrossEntropy)?;
            *t = tape;
            Ok(loss.value)
        },
        &x,
        &Tensor::scalar(1.0),
    )
}

/// Worst relative error per operation over five seeds.
pub fn gradient_suite() -> Vec<GradResult> {
    let op = |op, worst, tolerance| GradResult { op, worst, tolerance };
    vec![
        op("conv2d", worst_over_seeds(conv2d_check), GRAD_TOL),
        op("conv_transpose2d", worst_over_seeds(conv_transpose2d_check), GRAD_TOL),
        op("softmax_spatial", worst_over_seeds(softmax_spatial_check), GRAD_TOL),
        op("bilinear_upsample", worst_over_seeds(bilinear_upsample_check), GRAD_TOL),
        op("roi_align", worst_over_seeds(roi_align_check), GRAD_TOL),
        op("mhsa_forward", worst_over_seeds(|s| gcm_check(s, false)), GRAD_TOL),
        op("gcm_forward", worst_over_seeds(|s| gcm_check(s, true)), GRAD_TOL),
        op(
            "head_forward+loss",
            worst_over_seeds(|s| {
                HeadVariant::ALL.iter().map(|&v| head_loss_check(s, v)).fold(0.0, f64::max)
            }),
            GRAD_TOL_HEAD,
        ),
    ]
}

/// `(worst interior error, every out-of-image output exactly zero)` over
/// randomized affine fields, boxes and scales.
pub fn roi_align_affine(trials: u64) -> (f64, bool) {
    let mut worst: f64 = 0.0;
    let mut zeros = true;
    for seed in 0..trials {
        let mut r = rng(1000 + seed);
        let (c, h, w) = (2, r.gen_range(8..20), r.gen_range(8..20));
        let coef: Vec<(f64, f64, f64)> = (0..c).map(|_| (r.gen_range(-2.0..2.0), r.gen_range(-2.0..2.0), r.gen_range(-2.0..2.0))).collect();
        let feature = Tensor::from_fn(&[c, h, w], |i| {
            let (ch, y, x) = (i / (h * w), (i / w) % h, i % w);
            let (a, bx, by) = coef[ch];
            a + bx * x as f64 + by * y as f64
        });
        let scale = [1.0, 0.5, 0.25, 0.125][r.gen_range(0..4)];
        let spec = RoiAlignSpec::new(scale, (r.gen_range(1..8), r.gen_range(1..8)), r.gen_range(1..4));
        // Interior: every sample lies in [0, size−1] of the feature grid.
        let fx = |v: f64| (v + 0.5) / scale;
        let x1 = r.gen_range(fx(0.0)..fx(w as f64 / 2.0));
        let y1 = r.gen_range(fx(0.0)..fx(h as f64 / 2.0));
        let x2 = r.gen_range(x1 + 1.0..=fx(w as f64 - 1.0));
        let y2 = r.gen_range(y1 + 1.0..=fx(h as f64 - 1.0));
        let b = BoundingBox::new(x1, y1, x2, y2).unwrap();
        let out = roi_align(&feature, &b, &spec).unwrap();
        let (sx, sy) = (b.x1 * scale - 0.5, b.y1 * scale - 0.5);
        let (bw, bh) = (b.width() * scale / spec.output_w as f64, b.height() * scale / spec.output_h as f64);
        for ch in 0..c {
            let (a, cx, cy) = coef[ch];
            for py in 0..spec.output_h {
                for px in 0..spec.output_w {
                    let x = sx + (px as f64 + 0.5) * bw;
                    let y = sy + (py as f64 + 0.5) * bh;
                    worst = worst.max((out.at3(ch, py, px) - (a + cx * x + cy * y)).abs());
                }
            }
        }
        // Entirely beyond the grid: every sample is at least one cell outside.
        let far = (w.max(h) as f64 + 2.0) / scale;
        let outside = [
            BoundingBox::new(far, 0.0, far + 20.0, 10.0).unwrap(),
            BoundingBox::new(-far - 20.0, -far - 20.0, -far, -far).unwrap(),
            BoundingBox::new(0.0, far, 10.0, far + 15.0).unwrap(),
        ];
        for ob in outside {
            let o = roi_align(&feature, &ob, &spec).unwrap();
            zeros &= o.data().iter().all(|&v| v == 0.0);
        }
    }
    (worst, zeros)
}

/// Fraction of trunk outputs influenced by each probed input pixel; 1.0
/// everywhere means the field is global.
pub fn gcm_influence(variant: HeadVariant) -> Vec<f64> {
    let mut p = ParamSet::new();
    let cfg = HeadConfig {
        variant,
        head_channels: 8,
        heads: 2,
        ..Default::default()
    };
    let head = KeypointHead::new(&mut p, &cfg, 4, 14, &mut rng(7)).unwrap();
    let probe = positive_probe_params(&p);
    let input = Tensor::from_fn(&[4, 14, 14], |i| 0.25 + 0.5 * ((i * 37 % 101) as f64 / 101.0));
    [(0, 0), (7, 7), (13, 0), (3, 11), (13, 13)]
        .into_iter()
        .map(|px| {
            let hit = influence_of_pixel(&probe, &head, &input, px).unwrap();
            hit.iter().filter(|&&h| h).count() as f64 / hit.len() as f64
        })
        .collect()
}

/// Measured influence extent of the baseline trunk on an input wide
/// enough not to clip it.
pub fn baseline_measured_extent() -> usize {
    let mut p = ParamSet::new();
    let cfg = HeadConfig {
        variant: HeadVariant::Baseline8Conv,
        head_channels: 4,
        heads: 1,
        ..Default::default()
    };
    let head = KeypointHead::new(&mut p, &cfg, 4, 14, &mut rng(3)).unwrap();
    measured_extent(&p, &head, 25).unwrap()
}

/// Worst center and aspect deviation of `enlarge_box` over a randomized
/// 10×10×10 grid of box position, size and factor.
pub fn enlargement_grid() -> (f64, usize) {
    let mut r = rng(4242);
    let mut worst: f64 = 0.0;
    let mut n = 0;
    for i in 0..10 {
        for j in 0..10 {
            for k in 0..10 {
                let cx = -500.0 + 100.0 * i as f64 + r.gen_range(0.0..100.0);
                let cy = -500.0 + 100.0 * j as f64 + r.gen_range(0.0..100.0);
                let w = r.gen_range(0.5..400.0);
                let h = r.gen_range(0.5..400.0);
                let f = 1.0 + 0.1 * k as f64 + r.gen_range(0.0..0.1);
                let b = BoundingBox::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0).unwrap();
                let e = enlarge_box(&b, f).unwrap();
                let (bx, by) = b.center();
                let (ex, ey) = e.center();
                let scale = 1.0 + bx.abs().max(by.abs());
                worst = worst
                    .max((ex - bx).abs() / scale)
                    .max((ey - by).abs() / scale)
                    .max((e.width() / e.height() - b.width() / b.height()).abs() / (b.width() / b.height()))
                    .max((e.width() - f * b.width()).abs() / (f * b.width()));
                n += 1;
            }
        }
    }
    (worst, n)
}

pub fn keypoints_from(points: &[(f64, f64, bool)]) -> KeypointSet {
    KeypointSet(std::array::from_fn(|k| {
        let (x, y, labeled) = points[k];
        if labeled {
            Keypoint::labeled(x, y, Visibility::Visible)
        } else {
            Keypoint::default()
        }
    }))
}

/// Randomized scene: up to five people over one to three images, with
/// near, far and duplicate predictions and tied scores.
pub fn random_scene(seed: u64) -> (Vec<Prediction>, Vec<GroundTruth>) {
    let mut r = rng(5000 + seed);
    let images = r.gen_range(1..=3u64);
    let total = r.gen_range(1..=5usize);
    let mut gts = Vec::new();
    for i in 0..total {
        let image_id = r.gen_range(0..images);
        let side: f64 = [20.0, 45.0, 80.0, 120.0, 200.0][r.gen_range(0..5)] * r.gen_range(0.8..1.25);
        let (ox, oy) = (r.gen_range(0.0..300.0), r.gen_range(0.0..300.0));
        let pts: Vec<(f64, f64, bool)> = (0..NUM_KEYPOINTS)
            .map(|k| (ox + r.gen_range(0.0..side), oy + r.gen_range(0.0..side), k == 0 || r.gen_bool(0.8)))
            .collect();
        gts.push(GroundTruth {
            image_id,
            id: 1 + i as u64,
            keypoints: keypoints_from(&pts),
            area: side * side * r.gen_range(0.6..1.0),
        });
    }
    let mut preds = Vec::new();
    let mut next_id = 100;
    for g in &gts {
        let copies = r.gen_range(0..=2);
        for _ in 0..copies {
            let noise = [0.0, 0.02, 0.05, 0.1, 0.2, 0.5][r.gen_range(0..6)] * g.area.sqrt();
            let kp = KeypointSet(std::array::from_fn(|k| {
                Keypoint::labeled(
                    g.keypoints[k].x + r.gen_range(-1.0..=1.0) * noise,
                    g.keypoints[k].y + r.gen_range(-1.0..=1.0) * noise,
                    Visibility::Visible,
                )
            }));
            preds.push(Prediction {
                image_id: g.image_id,
                id: next_id,
                keypoints: kp,
                score: [0.9, 0.7, 0.5, 0.3][r.gen_range(0..4)],
                area: g.area * r.gen_range(0.7..1.3),
            });
            next_id += 1;
        }
    }
    for _ in 0..r.gen_range(0..=2) {
        let (ox, oy) = (r.gen_range(0.0..300.0), r.gen_range(0.0..300.0));
        let kp = KeypointSet(std::array::from_fn(|_| Keypoint::labeled(ox + r.gen_range(0.0..50.0), oy + r.gen_range(0.0..50.0), Visibility::Visible)));
        preds.push(Prediction {
            image_id: r.gen_range(0..images),
            id: next_id,
            keypoints: kp,
            score: [0.9, 0.7, 0.5, 0.3][r.gen_range(0..4)],
            area: r.gen_range(300.0..20000.0),
        });
        next_id += 1;
    }
    (preds, gts)
}

fn oracle_oks(p: &KeypointSet, g: &GroundTruth, sigmas: &SigmaTable) -> f64 {
    let mut sum = 0.0;
    let mut n = 0;
    for k in 0..NUM_KEYPOINTS {
        if g.keypoints[k].visibility.is_labeled() {
            let dx = p[k].x - g.keypoints[k].x;
            let dy = p[k].y - g.keypoints[k].y;
            let kappa = sigmas.0[k];
            sum += (-(dx * dx + dy * dy) / (2.0 * g.area * kappa * kappa)).exp();
            n += 1;
        }
    }
    sum / n as f64
}

/// AP of the brute-force definition: for every score cutoff the prefix
/// is matched from scratch, and interpolated precision at recall `r` is the
/// best precision of any cutoff reaching `r`.
pub fn oracle_ap(preds: &[Prediction], gts: &[GroundTruth], sigmas: &SigmaTable, t: f64, range: AreaRange) -> f64 {
    let mut order: Vec<&Prediction> = preds.iter().collect();
    order.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap().then(a.id.cmp(&b.id)));
    let in_range = |a: f64| range.contains(a);
    let num_gt = gts.iter().filter(|g| in_range(g.area)).count();
    if num_gt == 0 {
        return 0.0;
    }
    // (recall, precision) at every cutoff whose last prediction counts.
    let mut points: Vec<(f64, f64)> = Vec::new();
    for cut in 1..=order.len() {
        let mut taken = vec![false; gts.len()];
        let (mut tp, mut fp) = (0usize, 0usize);
        let mut last_counts = false;
        for (i, p) in order[..cut].iter().enumerate() {
            let mut best: Option<(bool, f64, usize)> = None;
            for (gi, g) in gts.iter().enumerate() {
                if taken[gi] || g.image_id != p.image_id {
                    continue;
                }
                let o = oracle_oks(&p.keypoints, g, sigmas);
                if o < t {
                    continue;
                }
                let cand = (in_range(g.area), o, gi);
                best = match best {
                    None => Some(cand),
                    Some(b) if (cand.0 && !b.0) || (cand.0 == b.0 && cand.1 > b.1) => Some(cand),
                    keep => keep,
                };
            }
            let counts = match best {
                Some((ok, _, gi)) => {
                    taken[gi] = true;
                    if ok {
                        tp += 1;
                    }
                    ok
                }
                None if in_range(p.area) => {
                    fp += 1;
                    true
                }
                None => false,
            };
            if i + 1 == cut {
                last_counts = counts;
            }
        }
        if last_counts {
            points.push((tp as f64 / num_gt as f64, tp as f64 / (tp + fp) as f64));
        }
    }
    let mut total = 0.0;
    for ri in 0..=100 {
        let r = ri as f64 / 100.0;
        total += points.iter().filter(|(rc, _)| *rc >= r).map(|(_, p)| *p).fold(0.0, f64::max);
    }
    total / 101.0
}

/// `(scenes, mismatching scenes)` between `ap_eval` and the oracle, over
/// every threshold and the all / medium / large ranges.
pub fn ap_oracle_equivalence(scenes: u64) -> (u64, Vec<u64>) {
    let params = EvalParams::default();
    let mut bad = Vec::new();
    for s in 0..scenes {
        let (preds, gts) = random_scene(s);
        let report = refpose::eval::ap_eval(&preds, &gts, &params).unwrap();
        let mean = |range| OKS_THRESHOLDS.iter().map(|&t| oracle_ap(&preds, &gts, &params.sigmas, t, range)).sum::<f64>() / 10.0;
        let per_t: Vec<f64> = OKS_THRESHOLDS.iter().map(|&t| oracle_ap(&preds, &gts, &params.sigmas, t, AreaRange::ALL)).collect();
        let ok = per_t.iter().zip(report.ap_per_threshold).all(|(a, b)| *a == b)
            && mean(AreaRange::ALL) == report.ap_mean
            && mean(AreaRange::MEDIUM) == report.ap_medium
            && mean(AreaRange::LARGE) == report.ap_large;
        if !ok {
            bad.push(s);
        }
    }
    (scenes, bad)
}
