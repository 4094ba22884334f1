//! Synthetic multi-person stick-figure images with exact COCO keypoints.
//!
//! Figures face the camera, so each person's left side appears on the image
//! right. Limbs are colored symmetrically, but hands, feet and ears differ
//! between sides so that a mirrored figure stays distinguishable. An edge-biased figure is annotated with its tight keypoint box,
//! which puts its extreme joints on the box border while the drawn hands,
//! feet and head extend past it. Other figures get a box padded by 10%.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Annotation, Dataset, ImageRecord};
use crate::error::{Error, Result};
use crate::geometry::{BoundingBox, ImageSize};
use crate::keypoints::{index as kp, Keypoint, KeypointSet, Visibility, NUM_KEYPOINTS};
use crate::tensor::Tensor;

/// Relative frequencies of figure sizes (heights of 15–30%, 30–55% and
/// 55–75% of the image side).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScaleMix {
    pub small: f64,
    pub medium: f64,
    pub large: f64,
}

impl Default for ScaleMix {
    fn default() -> Self {
        Self {
            small: 0.2,
            medium: 0.6,
            large: 0.2,
        }
    }
}

const SMALL_RANGE: (f64, f64) = (0.15, 0.30);
const MEDIUM_RANGE: (f64, f64) = (0.30, 0.55);
const LARGE_RANGE: (f64, f64) = (0.55, 0.75);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub num_images: usize,
    /// Side of the square images, in pixels.
    pub image_size: usize,
    /// Inclusive range of figures per image.
    pub persons_per_image: (usize, usize),
    pub scale_mix: ScaleMix,
    /// Limb width as a fraction of figure height.
    pub limb_thickness: f64,
    /// Probability that a figure is annotated with its tight keypoint box.
    pub edge_keypoint_bias: f64,
    /// Per-figure probability that one limb joint is covered and labeled occluded.
    pub occlusion_probability: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_images: 200,
            image_size: 128,
            persons_per_image: (1, 3),
            scale_mix: ScaleMix::default(),
            limb_thickness: 0.045,
            edge_keypoint_bias: 0.5,
            occlusion_probability: 0.05,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Err(Error::invalid("synth_config", reason));
        if self.num_images == 0 {
            return bad("num_images must be positive".into());
        }
        if self.image_size < 32 {
            return bad(format!("image_size {} below 32", self.image_size));
        }
        let (lo, hi) = self.persons_per_image;
        if lo == 0 || hi < lo {
            return bad(format!("persons_per_image ({lo}, {hi}) must satisfy 1 <= lo <= hi"));
        }
        for (name, p) in [
            ("edge_keypoint_bias", self.edge_keypoint_bias),
            ("occlusion_probability", self.occlusion_probability),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} {p} outside [0, 1]"));
            }
        }
        let m = self.scale_mix;
        if [m.small, m.medium, m.large].iter().any(|&w| !(w >= 0.0)) || m.small + m.medium + m.large <= 0.0 {
            return bad("scale_mix weights must be non-negative with a positive sum".into());
        }
        if !(self.limb_thickness > 0.0 && self.limb_thickness < 0.5) {
            return bad(format!("limb_thickness {} outside (0, 0.5)", self.limb_thickness));
        }
        Ok(())
    }
}

type Rgb = [f64; 3];

const HEAD: Rgb = [0.95, 0.82, 0.66];
const TORSO: Rgb = [0.80, 0.80, 0.85];
const UPPER_ARM: Rgb = [0.90, 0.30, 0.25];
const FOREARM: Rgb = [0.95, 0.70, 0.20];
const HANDS: [Rgb; 2] = [[1.00, 0.45, 0.80], [0.70, 0.45, 1.00]];
const THIGH: Rgb = [0.30, 0.40, 0.95];
const SHIN: Rgb = [0.30, 0.85, 0.90];
const FEET: [Rgb; 2] = [[0.55, 1.00, 0.35], [1.00, 1.00, 0.35]];
const EYE: Rgb = [0.05, 0.05, 0.10];
const NOSE: Rgb = [0.85, 0.10, 0.10];
const EARS: [Rgb; 2] = [[0.70, 0.50, 0.35], [0.35, 0.75, 0.75]];

/// A pose in figure units (height 1, x to the image right, y down).
struct Pose {
    joints: [(f64, f64); NUM_KEYPOINTS],
    hands: [(f64, f64); 2],
    feet: [(f64, f64); 2],
}

fn dir(theta: f64, side: f64) -> (f64, f64) {
    (side * theta.sin(), theta.cos())
}

fn random_pose(rng: &mut ChaCha8Rng) -> Pose {
    let mut j = [(0.0, 0.0); NUM_KEYPOINTS];
    j[kp::NOSE] = (0.0, 0.10);
    let mut hands = [(0.0, 0.0); 2];
    let mut feet = [(0.0, 0.0); 2];
    // side +1 is the person's left, drawn on the image right.
    for (s, side) in [(0, 1.0), (1, -1.0)] {
        let pick = |l: usize, r: usize| if s == 0 { l } else { r };
        j[pick(kp::LEFT_EYE, kp::RIGHT_EYE)] = (side * 0.025, 0.075);
        j[pick(kp::LEFT_EAR, kp::RIGHT_EAR)] = (side * 0.058, 0.088);
        let shoulder = (side * 0.11, 0.20);
        j[pick(kp::LEFT_SHOULDER, kp::RIGHT_SHOULDER)] = shoulder;

        let up = rng.gen_range(10f64..160.0).to_radians();
        let fore = (up + rng.gen_range(-40f64..60.0).to_radians()).clamp(0.0, std::f64::consts::PI);
        let (ux, uy) = dir(up, side);
        let elbow = (shoulder.0 + 0.16 * ux, shoulder.1 + 0.16 * uy);
        let (fx, fy) = dir(fore, side);
        let wrist = (elbow.0 + 0.15 * fx, elbow.1 + 0.15 * fy);
        j[pick(kp::LEFT_ELBOW, kp::RIGHT_ELBOW)] = elbow;
        j[pick(kp::LEFT_WRIST, kp::RIGHT_WRIST)] = wrist;
        hands[s] = (wrist.0 + 0.045 * fx, wrist.1 + 0.045 * fy);

        let hip = (side * 0.075, 0.50);
        j[pick(kp::LEFT_HIP, kp::RIGHT_HIP)] = hip;
        let thigh = rng.gen_range(2f64..40.0).to_radians();
        let shin = (thigh + rng.gen_range(-25f64..15.0).to_radians()).clamp(0.0, 0.8);
        let (tx, ty) = dir(thigh, side);
        let knee = (hip.0 + 0.24 * tx, hip.1 + 0.24 * ty);
        let (sx, sy) = dir(shin, side);
        let ankle = (knee.0 + 0.23 * sx, knee.1 + 0.23 * sy);
        j[pick(kp::LEFT_KNEE, kp::RIGHT_KNEE)] = knee;
        j[pick(kp::LEFT_ANKLE, kp::RIGHT_ANKLE)] = ankle;
        feet[s] = (ankle.0 + side * 0.035, ankle.1 + 0.03);
    }
    Pose { joints: j, hands, feet }
}

/// Rounds to a multiple of 1/256 so that mirroring about an integer width is exact.
fn dyadic(v: f64) -> f64 {
    (v * 256.0).round() / 256.0
}

struct Canvas {
    size: usize,
    data: Vec<f64>,
}

impl Canvas {
    fn set(&mut self, x: usize, y: usize, c: Rgb) {
        let plane = self.size * self.size;
        for ch in 0..3 {
            self.data[ch * plane + y * self.size + x] = c[ch];
        }
    }

    fn pixels_near(&self, x0: f64, y0: f64, x1: f64, y1: f64, r: f64) -> impl Iterator<Item = (usize, usize)> {
        let lo_x = ((x0.min(x1) - r).floor().max(0.0)) as usize;
        let hi_x = ((x0.max(x1) + r).ceil().max(0.0) as usize).min(self.size);
        let lo_y = ((y0.min(y1) - r).floor().max(0.0)) as usize;
        let hi_y = ((y0.max(y1) + r).ceil().max(0.0) as usize).min(self.size);
        (lo_y..hi_y).flat_map(move |y| (lo_x..hi_x).map(move |x| (x, y)))
    }

    fn segment(&mut self, a: (f64, f64), b: (f64, f64), r: f64, c: Rgb) {
        let (dx, dy) = (b.0 - a.0, b.1 - a.1);
        let len2 = dx * dx + dy * dy;
        let pix: Vec<_> = self.pixels_near(a.0, a.1, b.0, b.1, r).collect();
        for (x, y) in pix {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let t = if len2 > 0.0 { (((px - a.0) * dx + (py - a.1) * dy) / len2).clamp(0.0, 1.0) } else { 0.0 };
            let (qx, qy) = (a.0 + t * dx - px, a.1 + t * dy - py);
            if qx * qx + qy * qy <= r * r {
                self.set(x, y, c);
            }
        }
    }

    fn disc(&mut self, p: (f64, f64), r: f64, c: Rgb) {
        self.segment(p, p, r, c);
    }

    fn rect(&mut self, p: (f64, f64), half: f64, c: Rgb) {
        let pix: Vec<_> = self.pixels_near(p.0, p.1, p.0, p.1, half).collect();
        for (x, y) in pix {
            self.set(x, y, c);
        }
    }
}

struct Figure {
    keypoints: KeypointSet,
    bbox: BoundingBox,
}

fn sample_height(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> f64 {
    let m = cfg.scale_mix;
    let u = rng.gen_range(0.0..m.small + m.medium + m.large);
    let range = if u < m.small {
        SMALL_RANGE
    } else if u < m.small + m.medium {
        MEDIUM_RANGE
    } else {
        LARGE_RANGE
    };
    rng.gen_range(range.0..range.1) * cfg.image_size as f64
}

fn overlaps(a: &BoundingBox, b: &BoundingBox) -> bool {
    a.x1 < b.x2 && b.x1 < a.x2 && a.y1 < b.y2 && b.y1 < a.y2
}

fn draw_figure(canvas: &mut Canvas, pose: &Pose, place: impl Fn((f64, f64)) -> (f64, f64), height: f64, thickness: f64, tint: f64) {
    let c = |rgb: Rgb| rgb.map(|v| (v * tint).min(1.0));
    let j = |i: usize| place(pose.joints[i]);
    let r = 0.5 * thickness;
    let neck = place((0.0, 0.17));
    let pelvis = place((0.0, 0.50));
    canvas.segment(neck, pelvis, r * 1.3, c(TORSO));
    canvas.segment(j(kp::LEFT_SHOULDER), j(kp::RIGHT_SHOULDER), r, c(TORSO));
    canvas.segment(j(kp::LEFT_HIP), j(kp::RIGHT_HIP), r, c(TORSO));
    for (s, h, e, w, k, a) in [
        (kp::LEFT_SHOULDER, kp::LEFT_HIP, kp::LEFT_ELBOW, kp::LEFT_WRIST, kp::LEFT_KNEE, kp::LEFT_ANKLE),
        (kp::RIGHT_SHOULDER, kp::RIGHT_HIP, kp::RIGHT_ELBOW, kp::RIGHT_WRIST, kp::RIGHT_KNEE, kp::RIGHT_ANKLE),
    ] {
        canvas.segment(j(h), j(k), r, c(THIGH));
        canvas.segment(j(k), j(a), r, c(SHIN));
        canvas.segment(j(s), j(e), r, c(UPPER_ARM));
        canvas.segment(j(e), j(w), r, c(FOREARM));
    }
    for (s, &hand) in pose.hands.iter().enumerate() {
        canvas.disc(place(hand), 0.035 * height, c(HANDS[s]));
    }
    for (s, (&foot, &ankle)) in pose.feet.iter().zip(&[kp::LEFT_ANKLE, kp::RIGHT_ANKLE]).enumerate() {
        canvas.segment(j(ankle), place(foot), r, c(FEET[s]));
    }
    canvas.disc(place((0.0, 0.09)), 0.07 * height, c(HEAD));
    let dot = (0.012 * height).max(0.5);
    canvas.disc(j(kp::LEFT_EAR), dot * 1.2, c(EARS[0]));
    canvas.disc(j(kp::RIGHT_EAR), dot * 1.2, c(EARS[1]));
    canvas.disc(j(kp::LEFT_EYE), dot, EYE);
    canvas.disc(j(kp::RIGHT_EYE), dot, EYE);
    canvas.disc(j(kp::NOSE), dot, NOSE);
}

fn generate_image(cfg: &SynthConfig, index: usize, first_ann_id: u64) -> ImageRecord {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    let size = cfg.image_size;
    let s = size as f64;

    let base: Rgb = [rng.gen_range(0.0..0.3), rng.gen_range(0.0..0.3), rng.gen_range(0.0..0.3)];
    let slope: Rgb = [rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1)];
    let mut data = vec![0.0; 3 * size * size];
    for ch in 0..3 {
        for y in 0..size {
            for x in 0..size {
                let v = base[ch] + slope[ch] * (x + y) as f64 / (2.0 * s) + rng.gen_range(-0.03..0.03);
                data[(ch * size + y) * size + x] = v.clamp(0.0, 1.0);
            }
        }
    }
    let mut canvas = Canvas { size, data };

    let count = rng.gen_range(cfg.persons_per_image.0..=cfg.persons_per_image.1);
    let mut figures: Vec<Figure> = Vec::with_capacity(count);
    for _ in 0..count {
        let height = sample_height(cfg, &mut rng);
        let edge_biased = rng.gen_bool(cfg.edge_keypoint_bias);
        let mut chosen = None;
        for attempt in 0..20 {
            let pose = random_pose(&mut rng);
            let (min_x, max_x) = pose.joints.iter().fold((f64::MAX, f64::MIN), |(a, b), p| (a.min(p.0), b.max(p.0)));
            let max_y = pose.joints.iter().chain(&pose.feet).fold(0.0f64, |a, p| a.max(p.1));
            // Keep the drawing and the padded box inside the image.
            let mx = (0.08 + 0.1 * (max_x - min_x)) * height;
            let my = (0.04 + 0.1 * max_y) * height;
            let (lo, hi) = (mx - min_x * height, s - mx - max_x * height);
            let (top_lo, top_hi) = (my, s - my - max_y * height);
            if hi <= lo || top_hi <= top_lo {
                continue;
            }
            let ox = rng.gen_range(lo..hi);
            let oy = rng.gen_range(top_lo..top_hi);
            let place = move |p: (f64, f64)| (ox + p.0 * height, oy + p.1 * height);
            let mut kps = KeypointSet::default();
            for (k, &p) in pose.joints.iter().enumerate() {
                let (x, y) = place(p);
                kps[k] = Keypoint::labeled(dyadic(x), dyadic(y), Visibility::Visible);
            }
            let (x1, x2) = kps.iter().fold((f64::MAX, f64::MIN), |(a, b), k| (a.min(k.x), b.max(k.x)));
            let (y1, y2) = kps.iter().fold((f64::MAX, f64::MIN), |(a, b), k| (a.min(k.y), b.max(k.y)));
            let (px, py) = if edge_biased { (0.0, 0.0) } else { (dyadic(0.1 * (x2 - x1)), dyadic(0.1 * (y2 - y1))) };
            let bbox = BoundingBox::new(x1 - px, y1 - py, x2 + px, y2 + py).expect("figure has extent");
            let clear = figures.iter().all(|f| !overlaps(&f.bbox, &bbox));
            if clear || attempt == 19 {
                chosen = Some((pose, place, kps, bbox));
                break;
            }
        }
        let Some((pose, place, mut kps, bbox)) = chosen else {
            continue;
        };
        let thickness = (cfg.limb_thickness * height).max(1.0);
        let tint = rng.gen_range(0.85..1.1);
        draw_figure(&mut canvas, &pose, place, height, thickness, tint);
        if rng.gen_bool(cfg.occlusion_probability) {
            let limb_joints = [kp::LEFT_ELBOW, kp::RIGHT_ELBOW, kp::LEFT_KNEE, kp::RIGHT_KNEE, kp::LEFT_WRIST, kp::RIGHT_WRIST];
            let k = limb_joints[rng.gen_range(0..limb_joints.len())];
            canvas.rect((kps[k].x, kps[k].y), 1.5 * thickness, [0.45, 0.45, 0.45]);
            kps[k].visibility = Visibility::Occluded;
        }
        figures.push(Figure { keypoints: kps, bbox });
    }

    let annotations = figures
        .into_iter()
        .enumerate()
        .map(|(i, f)| Annotation {
            id: first_ann_id + i as u64,
            area: f.bbox.area(),
            bbox: f.bbox,
            keypoints: f.keypoints,
        })
        .collect();
    let id = index as u64 + 1;
    ImageRecord {
        id,
        size: ImageSize { width: size, height: size },
        file_name: format!("synth_{id:06}.png"),
        pixels: Some(Tensor::new(&[3, size, size], canvas.data).expect("canvas shape")),
        annotations,
    }
}

/// Generates the dataset; image `i` depends only on `(config, i)`.
pub fn synth_generate(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let stride = cfg.persons_per_image.1 as u64;
    let build = |i: usize| generate_image(cfg, i, 1 + i as u64 * stride);
    #[cfg(feature = "parallel")]
    let images: Vec<ImageRecord> = {
        use rayon::prelude::*;
        (0..cfg.num_images).into_par_iter().map(build).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let images: Vec<ImageRecord> = (0..cfg.num_images).map(build).collect();
    Ok(Dataset { images })
}

/// True if some labeled keypoint lies within `margin` (a fraction of the
/// box side) of the box border.
pub fn has_edge_keypoint(a: &Annotation, margin: f64) -> bool {
    let b = &a.bbox;
    a.keypoints.iter().filter(|k| k.visibility.is_labeled()).any(|k| {
        let mx = (k.x - b.x1).min(b.x2 - k.x);
        let my = (k.y - b.y1).min(b.y2 - k.y);
        mx <= margin * b.width() || my <= margin * b.height()
    })
}

/// Fraction of annotations with a keypoint within 5% of the box border.
pub fn edge_fraction(d: &Dataset) -> f64 {
    let n = d.num_annotations();
    if n == 0 {
        return 0.0;
    }
    let hits = d.images.iter().flat_map(|i| &i.annotations).filter(|a| has_edge_keypoint(a, 0.05)).count();
    hits as f64 / n as f64
}
