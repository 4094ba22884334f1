//! Person boxes and RoIAlign.
//!
//! Boxes live in continuous image-pixel coordinates with the origin at the
//! top-left corner of the top-left pixel. They are never clipped to the
//! image: an enlarged box may reach past the border, and RoIAlign reads the
//! region beyond the feature grid as zeros.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{SpatialGather, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageSize {
    pub width: usize,
    pub height: usize,
}

impl ImageSize {
    pub fn new(width: usize, height: usize) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid("image_size", format!("{width}x{height} has a zero side")));
        }
        Ok(Self { width, height })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    pub score: f64,
}

impl BoundingBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        Self::with_score(x1, y1, x2, y2, 1.0)
    }

    pub fn with_score(x1: f64, y1: f64, x2: f64, y2: f64, score: f64) -> Result<Self> {
        if ![x1, y1, x2, y2, score].iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                context: "box coordinates".into(),
            });
        }
        if x2 <= x1 || y2 <= y1 {
            return Err(Error::invalid(
                "box",
                format!("({x1}, {y1}, {x2}, {y2}) has non-positive extent"),
            ));
        }
        if !(0.0..=1.0).contains(&score) {
            return Err(Error::invalid("box", format!("score {score} outside [0, 1]")));
        }
        Ok(Self { x1, y1, x2, y2, score })
    }

    /// COCO `[x, y, w, h]` layout.
    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        Self::new(x, y, x + w, y + h)
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) * 0.5, (self.y1 + self.y2) * 0.5)
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x1 && x <= self.x2 && y >= self.y1 && y <= self.y2
    }

    pub fn intersects(&self, size: ImageSize) -> bool {
        self.x2 > 0.0 && self.y2 > 0.0 && self.x1 < size.width as f64 && self.y1 < size.height as f64
    }

    /// Mirror image under a horizontal flip of an image `image_width` wide.
    pub fn flipped(&self, image_width: f64) -> BoundingBox {
        BoundingBox {
            x1: image_width - self.x2,
            x2: image_width - self.x1,
            ..*self
        }
    }

    fn from_center(cx: f64, cy: f64, w: f64, h: f64, score: f64) -> BoundingBox {
        BoundingBox {
            x1: cx - 0.5 * w,
            y1: cy - 0.5 * h,
            x2: cx + 0.5 * w,
            y2: cy + 0.5 * h,
            score,
        }
    }
}

/// Scales width and height by `factor` about the box center.
pub fn enlarge_box(b: &BoundingBox, factor: f64) -> Result<BoundingBox> {
    if !(factor >= 1.0) || !factor.is_finite() {
        return Err(Error::invalid("enlarge_box", format!("factor {factor} must be >= 1")));
    }
    if factor == 1.0 {
        return Ok(*b);
    }
    let (cx, cy) = b.center();
    Ok(BoundingBox::from_center(cx, cy, b.width() * factor, b.height() * factor, b.score))
}

/// Simulated proposal noise: each side length is scaled by `1 + U(−s, s)` and
/// the center shifted by `U(−t, t)` times the side length.
pub fn jitter_box<R: Rng + ?Sized>(b: &BoundingBox, scale_noise: f64, shift_noise: f64, rng: &mut R) -> Result<BoundingBox> {
    for (name, v) in [("scale_noise", scale_noise), ("shift_noise", shift_noise)] {
        if !(0.0..=0.5).contains(&v) {
            return Err(Error::invalid("jitter_box", format!("{name} {v} outside [0, 0.5]")));
        }
    }
    if scale_noise == 0.0 && shift_noise == 0.0 {
        return Ok(*b);
    }
    let mut draw = |mag: f64| if mag > 0.0 { rng.gen_range(-mag..=mag) } else { 0.0 };
    let sw = 1.0 + draw(scale_noise);
    let sh = 1.0 + draw(scale_noise);
    let dx = draw(shift_noise);
    let dy = draw(shift_noise);
    let (cx, cy) = b.center();
    let (w, h) = (b.width(), b.height());
    Ok(BoundingBox::from_center(cx + dx * w, cy + dy * h, w * sw, h * sh, b.score))
}

/// RoIAlign settings for one extraction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoiAlignSpec {
    /// `1 / stride` of the source feature level.
    pub spatial_scale: f64,
    pub output_h: usize,
    pub output_w: usize,
    pub sampling_ratio: usize,
}

impl RoiAlignSpec {
    pub fn new(spatial_scale: f64, output_size: (usize, usize), sampling_ratio: usize) -> Self {
        Self {
            spatial_scale,
            output_h: output_size.0,
            output_w: output_size.1,
            sampling_ratio,
        }
    }
}

/// Bilinear taps of one sample point, with out-of-grid taps dropped (zero).
fn bilinear_taps(y: f64, x: f64, h: usize, w: usize, weight: f64, out: &mut Vec<(usize, f64)>) {
    let (y0, x0) = (y.floor(), x.floor());
    let (ly, lx) = (y - y0, x - x0);
    let (y0, x0) = (y0 as i64, x0 as i64);
    for (dy, wy) in [(0, 1.0 - ly), (1, ly)] {
        let yy = y0 + dy;
        if yy < 0 || yy >= h as i64 || wy == 0.0 {
            continue;
        }
        for (dx, wx) in [(0, 1.0 - lx), (1, lx)] {
            let xx = x0 + dx;
            if xx < 0 || xx >= w as i64 || wx == 0.0 {
                continue;
            }
            out.push((yy as usize * w + xx as usize, weight * wy * wx));
        }
    }
}

/// Builds the sampling plan that RoIAlign applies to every channel.
///
/// The box is mapped to feature coordinates as `x·scale − 0.5`; each of the
/// `h×w` bins averages `sampling_ratio²` bilinear samples placed at the
/// centers of a regular sub-grid of the bin.
pub fn roi_align_plan(feature_h: usize, feature_w: usize, b: &BoundingBox, spec: &RoiAlignSpec) -> Result<SpatialGather> {
    if spec.sampling_ratio == 0 {
        return Err(Error::invalid("roi_align", "sampling_ratio must be at least 1"));
    }
    if spec.output_h == 0 || spec.output_w == 0 {
        return Err(Error::invalid("roi_align", "output size must be positive"));
    }
    if !(spec.spatial_scale > 0.0) {
        return Err(Error::invalid("roi_align", "spatial_scale must be positive"));
    }
    let start_x = b.x1 * spec.spatial_scale - 0.5;
    let start_y = b.y1 * spec.spatial_scale - 0.5;
    let roi_w = b.width() * spec.spatial_scale;
    let roi_h = b.height() * spec.spatial_scale;
    if roi_w < 1e-6 {
        return Err(Error::DegenerateBox { axis: "x", span: roi_w });
    }
    if roi_h < 1e-6 {
        return Err(Error::DegenerateBox { axis: "y", span: roi_h });
    }
    let bin_w = roi_w / spec.output_w as f64;
    let bin_h = roi_h / spec.output_h as f64;
    let sr = spec.sampling_ratio;
    let weight = 1.0 / (sr * sr) as f64;

    let mut taps = Vec::with_capacity(spec.output_h * spec.output_w);
    for py in 0..spec.output_h {
        for px in 0..spec.output_w {
            let mut bin = Vec::with_capacity(4 * sr * sr);
            for iy in 0..sr {
                let y = start_y + py as f64 * bin_h + (iy as f64 + 0.5) * bin_h / sr as f64;
                for ix in 0..sr {
                    let x = start_x + px as f64 * bin_w + (ix as f64 + 0.5) * bin_w / sr as f64;
                    bilinear_taps(y, x, feature_h, feature_w, weight, &mut bin);
                }
            }
            taps.push(bin);
        }
    }
    Ok(SpatialGather {
        in_h: feature_h,
        in_w: feature_w,
        out_h: spec.output_h,
        out_w: spec.output_w,
        taps,
    })
}

/// RoIAlign of one box from a `C×H×W` feature map into `C×h×w`.
pub fn roi_align(feature: &Tensor, b: &BoundingBox, spec: &RoiAlignSpec) -> Result<Tensor> {
    let (_, h, w) = feature.dims3()?;
    roi_align_plan(h, w, b, spec)?.apply(feature)
}

/// Differentiable RoIAlign recorded on a tape.
pub fn roi_align_var(tape: &mut Tape, feature: Var, b: &BoundingBox, spec: &RoiAlignSpec) -> Result<Var> {
    let (_, h, w) = tape.value(feature).dims3()?;
    let plan = roi_align_plan(h, w, b, spec)?;
    tape.gather(feature, plan)
}
