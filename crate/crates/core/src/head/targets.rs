//! Box-relative heatmap targets, the keypoint loss, and argmax decoding.

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::BoundingBox;
use crate::keypoints::{Keypoint, KeypointSet, Visibility, NUM_KEYPOINTS};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum LossKind {
    /// Spatial softmax cross-entropy against a one-hot cell.
    #[default]
    CrossEntropy,
    /// Per-pixel MSE against a Gaussian of `sigma` heatmap cells.
    GaussianMse { sigma: f64 },
}

/// Training targets of one instance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Targets {
    pub heatmap_size: (usize, usize),
    /// Row-major cell index, `None` for masked keypoints.
    pub index: [Option<usize>; NUM_KEYPOINTS],
    /// Continuous heatmap coordinates `(u, v)` of the valid keypoints.
    pub coords: [Option<(f64, f64)>; NUM_KEYPOINTS],
}

impl Targets {
    pub fn num_valid(&self) -> usize {
        self.index.iter().flatten().count()
    }

    pub fn mask(&self) -> [bool; NUM_KEYPOINTS] {
        self.index.map(|i| i.is_some())
    }

    /// Gaussian heatmaps centered on the continuous keypoint positions
    /// (zero maps for masked keypoints).
    pub fn gaussian(&self, sigma: f64) -> Tensor {
        let (h, w) = self.heatmap_size;
        let mut t = Tensor::zeros(&[NUM_KEYPOINTS, h, w]);
        let data = t.data_mut();
        for (k, c) in self.coords.iter().enumerate() {
            if let Some((u, v)) = *c {
                for y in 0..h {
                    for x in 0..w {
                        let dx = x as f64 + 0.5 - u;
                        let dy = y as f64 + 0.5 - v;
                        data[(k * h + y) * w + x] = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
                    }
                }
            }
        }
        t
    }
}

/// Maps each labeled keypoint inside `b` (boundary inclusive) to its cell
/// under `u = (x − x1)/w·W`, `v = (y − y1)/h·H`.
pub fn encode_targets(keypoints: &KeypointSet, b: &BoundingBox, heatmap_size: (usize, usize)) -> Targets {
    let (h, w) = heatmap_size;
    let mut index = [None; NUM_KEYPOINTS];
    let mut coords = [None; NUM_KEYPOINTS];
    for (k, kp) in keypoints.iter().enumerate() {
        if !kp.visibility.is_labeled() || !b.contains(kp.x, kp.y) {
            continue;
        }
        let u = (kp.x - b.x1) / b.width() * w as f64;
        let v = (kp.y - b.y1) / b.height() * h as f64;
        let col = (u.floor() as usize).min(w - 1);
        let row = (v.floor() as usize).min(h - 1);
        index[k] = Some(row * w + col);
        coords[k] = Some((u, v));
    }
    Targets {
        heatmap_size,
        index,
        coords,
    }
}

/// Loss value plus the number of keypoints that contributed to it.
pub struct KeypointLoss {
    pub value: Var,
    /// Zero means the loss is identically zero and carries no gradient signal.
    pub valid: usize,
}

pub fn keypoint_loss(tape: &mut Tape, logits: Var, targets: &Targets, kind: LossKind) -> Result<KeypointLoss> {
    let shape = tape.shape(logits);
    if shape.len() != 3 || shape[1..] != [targets.heatmap_size.0, targets.heatmap_size.1] {
        return Err(Error::shape(
            "keypoint_loss",
            "heatmap extent",
            targets.heatmap_size.0 * targets.heatmap_size.1,
            shape[1..].iter().product::<usize>(),
        ));
    }
    let value = match kind {
        LossKind::CrossEntropy => tape.spatial_cross_entropy(logits, &targets.index)?,
        LossKind::GaussianMse { sigma } => tape.masked_mse(logits, &targets.gaussian(sigma), &targets.mask())?,
    };
    Ok(KeypointLoss {
        value,
        valid: targets.num_valid(),
    })
}

/// Argmax decoding (first maximum in row-major order) mapped back through
/// the box at cell centers; the score is the spatial softmax probability of
/// the chosen cell.
pub fn decode_heatmaps(heatmaps: &Tensor, b: &BoundingBox) -> Result<KeypointSet> {
    let (k, h, w) = heatmaps.dims3()?;
    if k != NUM_KEYPOINTS {
        return Err(Error::shape("decode_heatmaps", "keypoint channels", NUM_KEYPOINTS, k));
    }
    let mut out = KeypointSet::default();
    for (ch, kp) in out.0.iter_mut().enumerate() {
        let plane = heatmaps.channel(ch);
        let mut best = 0;
        for (i, &v) in plane.iter().enumerate() {
            if v > plane[best] {
                best = i;
            }
        }
        let max = plane[best];
        let z: f64 = plane.iter().map(|&v| (v - max).exp()).sum();
        let (row, col) = (best / w, best % w);
        *kp = Keypoint {
            x: b.x1 + (col as f64 + 0.5) / w as f64 * b.width(),
            y: b.y1 + (row as f64 + 0.5) / h as f64 * b.height(),
            score: 1.0 / z,
            visibility: Visibility::Visible,
        };
    }
    Ok(out)
}
