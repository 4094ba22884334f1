//! OKS, COCO-style keypoint AP, PCK, and per-keypoint / per-scale miss rates.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::keypoints::{KeypointSet, NUM_KEYPOINTS};

/// Standard COCO per-keypoint sigmas; the falloff constants are `κ = 2σ`.
pub const COCO_SIGMAS: [f64; NUM_KEYPOINTS] = [
    0.026, 0.025, 0.025, 0.035, 0.035, 0.079, 0.079, 0.072, 0.072, 0.062, 0.062, 0.107, 0.107, 0.087, 0.087, 0.089, 0.089,
];

/// OKS thresholds `0.50:0.05:0.95`.
pub const OKS_THRESHOLDS: [f64; 10] = [0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95];

pub const MEDIUM_AREA: (f64, f64) = (32.0 * 32.0, 96.0 * 96.0);

/// Per-keypoint falloff constants `κᵢ`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SigmaTable(pub [f64; NUM_KEYPOINTS]);

impl Default for SigmaTable {
    fn default() -> Self {
        SigmaTable(COCO_SIGMAS.map(|s| 2.0 * s))
    }
}

impl SigmaTable {
    pub fn constant(k: f64) -> Self {
        SigmaTable([k; NUM_KEYPOINTS])
    }

    pub fn validate(&self) -> Result<()> {
        if self.0.iter().all(|&k| k > 0.0 && k.is_finite()) {
            Ok(())
        } else {
            Err(Error::invalid("sigmas", "every falloff constant must be positive"))
        }
    }
}

/// Mean over labeled GT keypoints of `exp(−d²/(2·area·κ²))`.
pub fn oks(pred: &KeypointSet, gt: &KeypointSet, gt_area: f64, sigmas: &SigmaTable) -> Result<f64> {
    if !(gt_area > 0.0) {
        return Err(Error::invalid("oks", format!("gt_area {gt_area} must be positive")));
    }
    let mut total = 0.0;
    let mut n = 0;
    for k in 0..NUM_KEYPOINTS {
        if !gt[k].visibility.is_labeled() {
            continue;
        }
        let dx = pred[k].x - gt[k].x;
        let dy = pred[k].y - gt[k].y;
        let kappa = sigmas.0[k];
        total += (-(dx * dx + dy * dy) / (2.0 * gt_area * kappa * kappa)).exp();
        n += 1;
    }
    if n == 0 {
        return Err(Error::invalid("oks", "ground truth has no labeled keypoints"));
    }
    Ok(total / n as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub image_id: u64,
    pub id: u64,
    pub keypoints: KeypointSet,
    pub area: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub image_id: u64,
    /// Secondary sort key after the score.
    pub id: u64,
    pub keypoints: KeypointSet,
    pub score: f64,
    /// Area of the person box the prediction was made from.
    pub area: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalParams {
    pub sigmas: SigmaTable,
    /// PCK radius as a fraction of `√gt_area`.
    pub pck_alpha: f64,
    /// Miss radius as a fraction of `√gt_area`.
    pub radius_factor: f64,
}

impl Default for EvalParams {
    fn default() -> Self {
        Self {
            sigmas: SigmaTable::default(),
            pck_alpha: 0.2,
            radius_factor: 0.25,
        }
    }
}

impl EvalParams {
    pub fn validate(&self) -> Result<()> {
        self.sigmas.validate()?;
        if !(self.pck_alpha > 0.0) || !(self.radius_factor > 0.0) {
            return Err(Error::invalid("eval_params", "pck_alpha and radius_factor must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScaleBuckets {
    pub small: f64,
    pub medium: f64,
    pub large: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ap_mean: f64,
    pub ap_per_threshold: [f64; 10],
    pub ap_medium: f64,
    pub ap_large: f64,
    pub pck: f64,
    pub per_keypoint_miss_rate: [f64; NUM_KEYPOINTS],
    pub per_scale_miss_rate: ScaleBuckets,
    /// Labeled GT keypoints per scale bucket (denominators of the miss rates).
    pub per_scale_keypoints: ScaleBuckets,
    pub num_predictions: usize,
    pub num_ground_truths: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScaleBucket {
    Small,
    Medium,
    Large,
}

pub fn scale_bucket(area: f64) -> ScaleBucket {
    if area <= MEDIUM_AREA.0 {
        ScaleBucket::Small
    } else if area <= MEDIUM_AREA.1 {
        ScaleBucket::Medium
    } else {
        ScaleBucket::Large
    }
}

/// Area filter of one AP evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AreaRange {
    /// Exclusive lower bound.
    pub lo: f64,
    /// Inclusive upper bound.
    pub hi: f64,
}

impl AreaRange {
    pub const ALL: AreaRange = AreaRange { lo: f64::NEG_INFINITY, hi: f64::INFINITY };
    pub const MEDIUM: AreaRange = AreaRange { lo: MEDIUM_AREA.0, hi: MEDIUM_AREA.1 };
    pub const LARGE: AreaRange = AreaRange { lo: MEDIUM_AREA.1, hi: f64::INFINITY };

    pub fn contains(&self, area: f64) -> bool {
        area > self.lo && area <= self.hi
    }
}

/// Predictions in evaluation order: score descending, then id ascending.
pub fn sorted_predictions(predictions: &[Prediction]) -> Vec<&Prediction> {
    let mut v: Vec<&Prediction> = predictions.iter().collect();
    v.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.id.cmp(&b.id)));
    v
}

/// Outcome of one prediction at one threshold.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MatchOutcome {
    TruePositive,
    FalsePositive,
    /// Matched an out-of-range GT, or unmatched with an out-of-range box.
    Ignored,
}

/// Greedy matching within one image at threshold `t`, in the order given.
///
/// Each prediction takes the unmatched GT with the highest OKS ≥ `t`; GTs
/// inside `range` are preferred over ignored ones, and among equal OKS the
/// first GT wins. Returns one outcome per prediction.
pub fn match_image(
    preds: &[&Prediction],
    gts: &[&GroundTruth],
    oks_matrix: &[Vec<f64>],
    t: f64,
    range: AreaRange,
) -> Vec<MatchOutcome> {
    let ignored: Vec<bool> = gts.iter().map(|g| !range.contains(g.area)).collect();
    // Non-ignored GTs are visited first, stably.
    let mut order: Vec<usize> = (0..gts.len()).collect();
    order.sort_by_key(|&g| ignored[g]);
    let mut taken = vec![false; gts.len()];
    preds
        .iter()
        .enumerate()
        .map(|(d, p)| {
            let mut best: Option<usize> = None;
            let mut best_oks = t;
            for &g in &order {
                if taken[g] {
                    continue;
                }
                if let Some(m) = best {
                    if !ignored[m] && ignored[g] {
                        break;
                    }
                }
                let o = oks_matrix[d][g];
                if o < best_oks || (best.is_some() && o == best_oks) {
                    continue;
                }
                best_oks = o;
                best = Some(g);
            }
            match best {
                Some(g) => {
                    taken[g] = true;
                    if ignored[g] {
                        MatchOutcome::Ignored
                    } else {
                        MatchOutcome::TruePositive
                    }
                }
                None if !range.contains(p.area) => MatchOutcome::Ignored,
                None => MatchOutcome::FalsePositive,
            }
        })
        .collect()
}

/// 101-point interpolated AP from outcomes listed in global score order.
pub fn interpolated_ap(outcomes: &[MatchOutcome], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut recall = Vec::new();
    let mut precision = Vec::new();
    for o in outcomes {
        match o {
            MatchOutcome::TruePositive => tp += 1,
            MatchOutcome::FalsePositive => fp += 1,
            MatchOutcome::Ignored => continue,
        }
        recall.push(tp as f64 / num_gt as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    for i in (1..precision.len()).rev() {
        if precision[i] > precision[i - 1] {
            precision[i - 1] = precision[i];
        }
    }
    let mut total = 0.0;
    for r in 0..=100 {
        let threshold = r as f64 / 100.0;
        let idx = recall.partition_point(|&rc| rc < threshold);
        if idx < precision.len() {
            total += precision[idx];
        }
    }
    total / 101.0
}

struct ImageGroup<'a> {
    preds: Vec<&'a Prediction>,
    gts: Vec<&'a GroundTruth>,
    oks: Vec<Vec<f64>>,
}

fn group_by_image<'a>(
    predictions: &'a [Prediction],
    ground_truths: &'a [GroundTruth],
    sigmas: &SigmaTable,
) -> Result<BTreeMap<u64, ImageGroup<'a>>> {
    let mut groups: BTreeMap<u64, ImageGroup<'a>> = BTreeMap::new();
    for g in ground_truths {
        groups
            .entry(g.image_id)
            .or_insert_with(|| ImageGroup {
                preds: Vec::new(),
                gts: Vec::new(),
                oks: Vec::new(),
            })
            .gts
            .push(g);
    }
    for p in sorted_predictions(predictions) {
        groups
            .entry(p.image_id)
            .or_insert_with(|| ImageGroup {
                preds: Vec::new(),
                gts: Vec::new(),
                oks: Vec::new(),
            })
            .preds
            .push(p);
    }
    for group in groups.values_mut() {
        group.oks = group
            .preds
            .iter()
            .map(|p| group.gts.iter().map(|g| oks(&p.keypoints, &g.keypoints, g.area, sigmas)).collect::<Result<Vec<_>>>())
            .collect::<Result<_>>()?;
    }
    Ok(groups)
}

/// Per-threshold AP over one area range.
pub fn ap_per_threshold(predictions: &[Prediction], ground_truths: &[GroundTruth], sigmas: &SigmaTable, range: AreaRange) -> Result<[f64; 10]> {
    let groups = group_by_image(predictions, ground_truths, sigmas)?;
    let num_gt = ground_truths.iter().filter(|g| range.contains(g.area)).count();
    let order = sorted_predictions(predictions);
    let rank: BTreeMap<(u64, u64), usize> = order.iter().enumerate().map(|(i, p)| ((p.image_id, p.id), i)).collect();
    let mut out = [0.0; 10];
    for (ti, &t) in OKS_THRESHOLDS.iter().enumerate() {
        let mut outcomes = vec![MatchOutcome::Ignored; order.len()];
        for group in groups.values() {
            let res = match_image(&group.preds, &group.gts, &group.oks, t, range);
            for (p, o) in group.preds.iter().zip(res) {
                outcomes[rank[&(p.image_id, p.id)]] = o;
            }
        }
        out[ti] = interpolated_ap(&outcomes, num_gt);
    }
    Ok(out)
}

/// Threshold-free greedy assignment used by PCK and the miss analysis: each
/// prediction (in score order) takes the unmatched GT of its image with the
/// highest positive OKS. Returns, per GT, the matched prediction.
pub fn assign_predictions<'a>(
    predictions: &'a [Prediction],
    ground_truths: &'a [GroundTruth],
    sigmas: &SigmaTable,
) -> Result<Vec<Option<&'a Prediction>>> {
    let groups = group_by_image(predictions, ground_truths, sigmas)?;
    let index: BTreeMap<(u64, u64), usize> = ground_truths.iter().enumerate().map(|(i, g)| ((g.image_id, g.id), i)).collect();
    let mut out = vec![None; ground_truths.len()];
    for group in groups.values() {
        let mut taken = vec![false; group.gts.len()];
        for (d, p) in group.preds.iter().enumerate() {
            let mut best: Option<usize> = None;
            for g in 0..group.gts.len() {
                if taken[g] || group.oks[d][g] <= 0.0 {
                    continue;
                }
                if best.map_or(true, |b| group.oks[d][g] > group.oks[d][b]) {
                    best = Some(g);
                }
            }
            if let Some(g) = best {
                taken[g] = true;
                out[index[&(group.gts[g].image_id, group.gts[g].id)]] = Some(*p);
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MissReport {
    pub per_keypoint: [f64; NUM_KEYPOINTS],
    pub per_scale: ScaleBuckets,
    pub per_scale_keypoints: ScaleBuckets,
    /// Fraction of all labeled GT keypoints that were missed.
    pub overall: f64,
}

fn radius_hits(
    predictions: &[Prediction],
    ground_truths: &[GroundTruth],
    sigmas: &SigmaTable,
    factor: f64,
) -> Result<Vec<(usize, f64, bool)>> {
    let assigned = assign_predictions(predictions, ground_truths, sigmas)?;
    let mut out = Vec::new();
    for (g, p) in ground_truths.iter().zip(assigned) {
        let radius = factor * g.area.sqrt();
        for k in 0..NUM_KEYPOINTS {
            if !g.keypoints[k].visibility.is_labeled() {
                continue;
            }
            let hit = p.is_some_and(|p| {
                let dx = p.keypoints[k].x - g.keypoints[k].x;
                let dy = p.keypoints[k].y - g.keypoints[k].y;
                (dx * dx + dy * dy).sqrt() <= radius
            });
            out.push((k, g.area, hit));
        }
    }
    Ok(out)
}

/// A labeled GT keypoint is missed when the prediction assigned to its
/// instance is farther than `radius_factor·√area` from it (or there is none).
/// Empty buckets report 0.
pub fn miss_rate(predictions: &[Prediction], ground_truths: &[GroundTruth], sigmas: &SigmaTable, radius_factor: f64) -> Result<MissReport> {
    if !(radius_factor > 0.0) {
        return Err(Error::invalid("miss_rate", "radius_factor must be positive"));
    }
    let hits = radius_hits(predictions, ground_truths, sigmas, radius_factor)?;
    let mut kp_missed = [0usize; NUM_KEYPOINTS];
    let mut kp_total = [0usize; NUM_KEYPOINTS];
    let mut scale_missed = [0usize; 3];
    let mut scale_total = [0usize; 3];
    for &(k, area, hit) in &hits {
        let s = scale_bucket(area) as usize;
        kp_total[k] += 1;
        scale_total[s] += 1;
        if !hit {
            kp_missed[k] += 1;
            scale_missed[s] += 1;
        }
    }
    let rate = |m: usize, t: usize| if t == 0 { 0.0 } else { m as f64 / t as f64 };
    let total_missed: usize = kp_missed.iter().sum();
    Ok(MissReport {
        per_keypoint: std::array::from_fn(|k| rate(kp_missed[k], kp_total[k])),
        per_scale: ScaleBuckets {
            small: rate(scale_missed[0], scale_total[0]),
            medium: rate(scale_missed[1], scale_total[1]),
            large: rate(scale_missed[2], scale_total[2]),
        },
        per_scale_keypoints: ScaleBuckets {
            small: scale_total[0] as f64,
            medium: scale_total[1] as f64,
            large: scale_total[2] as f64,
        },
        overall: rate(total_missed, hits.len()),
    })
}

/// Fraction of labeled GT keypoints within `alpha·√area` of the assigned prediction.
pub fn pck(predictions: &[Prediction], ground_truths: &[GroundTruth], sigmas: &SigmaTable, alpha: f64) -> Result<f64> {
    let hits = radius_hits(predictions, ground_truths, sigmas, alpha)?;
    if hits.is_empty() {
        return Ok(0.0);
    }
    Ok(hits.iter().filter(|h| h.2).count() as f64 / hits.len() as f64)
}

pub fn ap_eval(predictions: &[Prediction], ground_truths: &[GroundTruth], params: &EvalParams) -> Result<EvalReport> {
    params.validate()?;
    for g in ground_truths {
        if g.keypoints.num_labeled() == 0 {
            return Err(Error::invalid(
                "ap_eval",
                format!("ground truth {} of image {} has no labeled keypoints", g.id, g.image_id),
            ));
        }
    }
    let all = ap_per_threshold(predictions, ground_truths, &params.sigmas, AreaRange::ALL)?;
    let medium = ap_per_threshold(predictions, ground_truths, &params.sigmas, AreaRange::MEDIUM)?;
    let large = ap_per_threshold(predictions, ground_truths, &params.sigmas, AreaRange::LARGE)?;
    let mean = |v: &[f64; 10]| v.iter().sum::<f64>() / 10.0;
    let miss = miss_rate(predictions, ground_truths, &params.sigmas, params.radius_factor)?;
    Ok(EvalReport {
        ap_mean: mean(&all),
        ap_per_threshold: all,
        ap_medium: mean(&medium),
        ap_large: mean(&large),
        pck: pck(predictions, ground_truths, &params.sigmas, params.pck_alpha)?,
        per_keypoint_miss_rate: miss.per_keypoint,
        per_scale_miss_rate: miss.per_scale,
        per_scale_keypoints: miss.per_scale_keypoints,
        num_predictions: predictions.len(),
        num_ground_truths: ground_truths.len(),
    })
}
