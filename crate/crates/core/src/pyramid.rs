//! Toy convolutional backbone, FPN top-down fusion, and pyramid level selection.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::geometry::{enlarge_box, roi_align, roi_align_var, BoundingBox, RoiAlignSpec};
use crate::params::{Conv, Graph, ParamSet};
use crate::tensor::Tensor;

/// Input extents must be divisible by the coarsest stride.
pub const INPUT_MULTIPLE: usize = 32;

/// Stride of pyramid level `P{level}`.
pub fn level_stride(level: u8) -> usize {
    1 << level
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub stem_channels: usize,
    pub stage_channels: [usize; 4],
    pub convs_per_stage: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            stem_channels: 16,
            stage_channels: [16, 32, 64, 128],
            convs_per_stage: 3,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stem_channels == 0 || self.stage_channels.contains(&0) || self.convs_per_stage == 0 {
            return Err(Error::invalid("backbone", "channel widths and conv counts must be positive"));
        }
        Ok(())
    }
}

/// Stem (stride 2) followed by four stages that each halve the resolution,
/// giving stage outputs at strides 4, 8, 16 and 32.
#[derive(Clone, Debug)]
pub struct Backbone {
    stem: Conv,
    stages: Vec<Vec<Conv>>,
}

impl Backbone {
    pub fn new<R: Rng + ?Sized>(params: &mut ParamSet, cfg: &BackboneConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let stem = Conv::new(params, "backbone.stem", 3, cfg.stem_channels, 3, 2, 1, rng);
        let mut cin = cfg.stem_channels;
        let mut stages = Vec::with_capacity(4);
        for (s, &width) in cfg.stage_channels.iter().enumerate() {
            let mut convs = Vec::with_capacity(cfg.convs_per_stage);
            for i in 0..cfg.convs_per_stage {
                let stride = if i == 0 { 2 } else { 1 };
                let name = format!("backbone.stage{}.conv{}", s + 1, i);
                convs.push(Conv::new(params, &name, if i == 0 { cin } else { width }, width, 3, stride, 1, rng));
            }
            cin = width;
            stages.push(convs);
        }
        Ok(Self { stem, stages })
    }

    pub fn forward(&self, g: &mut Graph<'_>, image: Var) -> Result<[Var; 4]> {
        let (c, h, w) = g.value(image).dims3()?;
        if c != 3 {
            return Err(Error::shape("backbone_forward", "image channels", 3, c));
        }
        for (axis, extent) in [("height", h), ("width", w)] {
            if extent % INPUT_MULTIPLE != 0 {
                return Err(Error::invalid(
                    "backbone_forward",
                    format!("input {axis} {extent} must be a multiple of {INPUT_MULTIPLE}"),
                ));
            }
        }
        let mut x = self.stem.forward_relu(g, image)?;
        let mut outs = Vec::with_capacity(4);
        for stage in &self.stages {
            for conv in stage {
                x = conv.forward_relu(g, x)?;
            }
            outs.push(x);
        }
        Ok([outs[0], outs[1], outs[2], outs[3]])
    }
}

/// Lateral `1×1` projections, bilinear top-down pathway, `3×3` smoothing.
#[derive(Clone, Debug)]
pub struct Fpn {
    lateral: Vec<Conv>,
    smooth: Vec<Conv>,
    pub channels: usize,
}

impl Fpn {
    pub fn new<R: Rng + ?Sized>(params: &mut ParamSet, stage_channels: &[usize; 4], channels: usize, rng: &mut R) -> Self {
        let lateral = (0..4)
            .map(|i| Conv::new(params, &format!("fpn.lateral{}", i + 2), stage_channels[i], channels, 1, 1, 0, rng))
            .collect();
        let smooth = (0..4)
            .map(|i| Conv::same3(params, &format!("fpn.output{}", i + 2), channels, channels, rng))
            .collect();
        Self {
            lateral,
            smooth,
            channels,
        }
    }

    /// Fuses stage outputs (strides 4..32) into `[P2, P3, P4, P5]`.
    pub fn forward(&self, g: &mut Graph<'_>, stages: [Var; 4]) -> Result<[Var; 4]> {
        for i in 0..3 {
            let (_, h, w) = g.value(stages[i]).dims3()?;
            let (_, h2, w2) = g.value(stages[i + 1]).dims3()?;
            if h2 * 2 != h {
                return Err(Error::shape("fpn_fuse", format!("stage {} height", i + 2), h / 2, h2));
            }
            if w2 * 2 != w {
                return Err(Error::shape("fpn_fuse", format!("stage {} width", i + 2), w / 2, w2));
            }
        }
        let mut merged = [stages[3]; 4];
        merged[3] = self.lateral[3].forward(g, stages[3])?;
        for i in (0..3).rev() {
            let lat = self.lateral[i].forward(g, stages[i])?;
            let up = g.tape.bilinear_upsample(merged[i + 1], 2)?;
            merged[i] = g.tape.add(lat, up)?;
        }
        let mut out = merged;
        for i in 0..4 {
            out[i] = self.smooth[i].forward(g, merged[i])?;
        }
        Ok(out)
    }
}

/// P2–P5 feature maps of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    levels: [Tensor; 4],
}

impl FeaturePyramid {
    pub fn new(levels: [Tensor; 4]) -> Result<Self> {
        let (c, h, w) = levels[0].dims3()?;
        for (i, t) in levels.iter().enumerate().skip(1) {
            let (ci, hi, wi) = t.dims3()?;
            if ci != c {
                return Err(Error::shape("feature_pyramid", format!("P{} channels", i + 2), c, ci));
            }
            if hi << i != h || wi << i != w {
                return Err(Error::shape("feature_pyramid", format!("P{} height", i + 2), h >> i, hi));
            }
        }
        Ok(Self { levels })
    }

    /// Level `P{level}`, `level ∈ 2..=5`.
    pub fn level(&self, level: u8) -> &Tensor {
        &self.levels[usize::from(level - 2)]
    }

    pub fn channels(&self) -> usize {
        self.levels[0].shape()[0]
    }
}

/// Rule assigning a person box to a pyramid level.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LevelStrategy {
    /// `floor(k0 + log2(sqrt(w·h) / canonical))`, clamped to `[2, 5]`.
    SizeBased { k0: i32, canonical: f64 },
    /// Always the given level.
    Fixed(u8),
}

impl LevelStrategy {
    pub const FIXED_P2: LevelStrategy = LevelStrategy::Fixed(2);

    pub fn size_based() -> Self {
        LevelStrategy::SizeBased { k0: 4, canonical: 224.0 }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            LevelStrategy::Fixed(l) if !(2..=5).contains(&l) => {
                Err(Error::invalid("level_strategy", format!("level P{l} outside P2..P5")))
            }
            LevelStrategy::SizeBased { canonical, .. } if !(canonical > 0.0) => {
                Err(Error::invalid("level_strategy", "canonical size must be positive"))
            }
            _ => Ok(()),
        }
    }
}

impl Default for LevelStrategy {
    fn default() -> Self {
        LevelStrategy::FIXED_P2
    }
}

impl fmt::Display for LevelStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            LevelStrategy::Fixed(l) => write!(f, "p{l}"),
            LevelStrategy::SizeBased { k0: 4, canonical } if canonical == 224.0 => f.write_str("size-based"),
            LevelStrategy::SizeBased { k0, canonical } => write!(f, "size-based:{k0}:{canonical}"),
        }
    }
}

impl FromStr for LevelStrategy {
    type Err = Error;

    /// `p2`..`p5`, `size-based`, or `size-based:<k0>:<canonical>`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::invalid("level_strategy", format!("unrecognized strategy {s:?}"));
        let lower = s.trim().to_ascii_lowercase();
        let parsed = if let Some(rest) = lower.strip_prefix("size-based") {
            if rest.is_empty() {
                LevelStrategy::size_based()
            } else {
                let mut parts = rest.strip_prefix(':').ok_or_else(bad)?.split(':');
                let k0 = parts.next().and_then(|p| p.parse().ok()).ok_or_else(bad)?;
                let canonical = parts.next().and_then(|p| p.parse().ok()).ok_or_else(bad)?;
                if parts.next().is_some() {
                    return Err(bad());
                }
                LevelStrategy::SizeBased { k0, canonical }
            }
        } else {
            let level = lower.strip_prefix('p').and_then(|l| l.parse().ok()).ok_or_else(bad)?;
            LevelStrategy::Fixed(level)
        };
        parsed.validate()?;
        Ok(parsed)
    }
}

impl Serialize for LevelStrategy {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for LevelStrategy {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

pub fn select_level(b: &BoundingBox, strategy: &LevelStrategy) -> u8 {
    match *strategy {
        LevelStrategy::Fixed(l) => l,
        LevelStrategy::SizeBased { k0, canonical } => {
            let scale = b.area().sqrt();
            let level = (f64::from(k0) + (scale / canonical).log2()).floor();
            level.clamp(2.0, 5.0) as u8
        }
    }
}

/// Settings of the enlarge → select → RoIAlign extraction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExtractionConfig {
    pub strategy: LevelStrategy,
    pub magnification: f64,
    pub output_size: usize,
    pub sampling_ratio: usize,
}

impl Default for ExtractionConfig {
    fn default() -> Self {
        Self {
            strategy: LevelStrategy::FIXED_P2,
            magnification: 1.3,
            output_size: 14,
            sampling_ratio: 2,
        }
    }
}

impl ExtractionConfig {
    /// Box actually sampled, its level, and the RoIAlign settings for that level.
    pub fn plan(&self, b: &BoundingBox) -> Result<(BoundingBox, u8, RoiAlignSpec)> {
        let enlarged = enlarge_box(b, self.magnification)?;
        let level = select_level(&enlarged, &self.strategy);
        let spec = RoiAlignSpec::new(
            1.0 / level_stride(level) as f64,
            (self.output_size, self.output_size),
            self.sampling_ratio,
        );
        Ok((enlarged, level, spec))
    }
}

/// Enlarges the box, picks a level, and RoIAligns `C×s×s` features from it.
///
/// Returns the enlarged box alongside the features: heatmaps decode relative
/// to the region actually sampled.
pub fn extract_person_features(
    pyramid: &FeaturePyramid,
    b: &BoundingBox,
    cfg: &ExtractionConfig,
) -> Result<(Tensor, BoundingBox)> {
    let (enlarged, level, spec) = cfg.plan(b)?;
    Ok((roi_align(pyramid.level(level), &enlarged, &spec)?, enlarged))
}

/// Tape version of [`extract_person_features`] over `[P2, P3, P4, P5]` variables.
pub fn extract_person_features_var(
    g: &mut Graph<'_>,
    pyramid: &[Var; 4],
    b: &BoundingBox,
    cfg: &ExtractionConfig,
) -> Result<(Var, BoundingBox)> {
    let (enlarged, level, spec) = cfg.plan(b)?;
    let v = roi_align_var(&mut g.tape, pyramid[usize::from(level - 2)], &enlarged, &spec)?;
    Ok((v, enlarged))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::{grad_check, Tape};
    use crate::tensor::ops;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn square(side: f64) -> BoundingBox {
        BoundingBox::new(0.0, 0.0, side, side).unwrap()
    }

    #[test]
    fn size_based_examples() {
        let s = LevelStrategy::size_based();
        assert_eq!(select_level(&square(224.0), &s), 4);
        assert_eq!(select_level(&square(56.0), &s), 2);
        assert_eq!(select_level(&square(10.0), &s), 2);
        assert_eq!(select_level(&square(2000.0), &s), 5);
        assert_eq!(select_level(&square(500.0), &LevelStrategy::FIXED_P2), 2);
    }

    #[test]
    fn fixed_p2_over_box_grid() {
        for w in (1..60).map(|i| i as f64 * 7.5) {
            for h in (1..60).map(|i| i as f64 * 9.25) {
                let b = BoundingBox::new(-3.0, 4.0, -3.0 + w, 4.0 + h).unwrap();
                assert_eq!(select_level(&b, &LevelStrategy::FIXED_P2), 2);
            }
        }
    }

    #[test]
    fn strategy_parsing_round_trip() {
        for s in ["p2", "p5", "size-based", "size-based:4:36"] {
            let parsed: LevelStrategy = s.parse().unwrap();
            assert_eq!(parsed.to_string(), s);
        }
        assert!("p6".parse::<LevelStrategy>().is_err());
        assert!("size-based:4".parse::<LevelStrategy>().is_err());
        assert!("nearest".parse::<LevelStrategy>().is_err());
    }

    proptest! {
        #[test]
        fn size_based_is_monotone_in_area(a in 1.0f64..3000.0, b in 1.0f64..3000.0) {
            let s = LevelStrategy::size_based();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(select_level(&square(lo), &s) <= select_level(&square(hi), &s));
        }

        #[test]
        fn doubling_sides_adds_one_level(w in 1.0f64..400.0, h in 1.0f64..400.0) {
            let canonical = 224.0;
            let raw = |w: f64, h: f64| (4.0 + ((w * h).sqrt() / canonical).log2()).floor();
            prop_assert_eq!(raw(2.0 * w, 2.0 * h), raw(w, h) + 1.0);
            let s = LevelStrategy::size_based();
            let b = BoundingBox::new(0.0, 0.0, w, h).unwrap();
            let b2 = BoundingBox::new(0.0, 0.0, 2.0 * w, 2.0 * h).unwrap();
            let (l1, l2) = (select_level(&b, &s), select_level(&b2, &s));
            prop_assert!(l2 == (l1 + 1).min(5) || (l1 == 2 && raw(w, h) < 2.0));
        }
    }

    fn build(seed: u64, cfg: &BackboneConfig, fpn_channels: usize) -> (ParamSet, Backbone, Fpn) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let bb = Backbone::new(&mut params, cfg, &mut rng).unwrap();
        let fpn = Fpn::new(&mut params, &cfg.stage_channels, fpn_channels, &mut rng);
        (params, bb, fpn)
    }

    #[test]
    fn backbone_strides_and_errors() {
        let cfg = BackboneConfig {
            stem_channels: 4,
            stage_channels: [4, 4, 8, 8],
            convs_per_stage: 2,
        };
        let (params, bb, _) = build(0, &cfg, 4);
        let mut g = Graph::new(&params);
        let img = g.input(Tensor::full(&[3, 64, 64], 0.5));
        let outs = bb.forward(&mut g, img).unwrap();
        let sizes: Vec<usize> = outs.iter().map(|&v| g.value(v).shape()[1]).collect();
        assert_eq!(sizes, [16, 8, 4, 2]);

        let bad = g.input(Tensor::zeros(&[3, 70, 64]));
        let err = bb.forward(&mut g, bad).unwrap_err().to_string();
        assert!(err.contains("multiple of 32"), "{err}");
    }

    #[test]
    fn backbone_zero_weights_give_zero_outputs() {
        let cfg = BackboneConfig {
            stem_channels: 2,
            stage_channels: [2, 2, 2, 2],
            convs_per_stage: 1,
        };
        let (mut params, bb, _) = build(1, &cfg, 2);
        for id in params.ids().collect::<Vec<_>>() {
            let shape = params.get(id).shape().to_vec();
            *params.get_mut(id) = Tensor::zeros(&shape);
        }
        let mut g = Graph::new(&params);
        let img = g.input(Tensor::full(&[3, 32, 32], 0.7));
        for v in bb.forward(&mut g, img).unwrap() {
            assert!(g.value(v).data().iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn backbone_is_deterministic() {
        let cfg = BackboneConfig::default();
        let run = || {
            let (params, bb, fpn) = build(42, &cfg, 8);
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            let mut g = Graph::new(&params);
            let img = g.input(Tensor::rand_uniform(&[3, 64, 32], 0.0, 1.0, &mut rng));
            let s = bb.forward(&mut g, img).unwrap();
            let p = fpn.forward(&mut g, s).unwrap();
            p.iter().map(|&v| g.value(v).clone()).collect::<Vec<_>>()
        };
        let (a, b) = (run(), run());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.data(), y.data());
        }
    }

    fn random_stages(rng: &mut ChaCha8Rng, widths: [usize; 4], base: usize) -> [Tensor; 4] {
        std::array::from_fn(|i| Tensor::rand_uniform(&[widths[i], base >> i, base >> i], -1.0, 1.0, rng))
    }

    #[test]
    fn fpn_matches_straight_line_composition() {
        let cfg = BackboneConfig {
            stem_channels: 3,
            stage_channels: [3, 4, 5, 6],
            convs_per_stage: 1,
        };
        let (params, _, fpn) = build(3, &cfg, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let stages = random_stages(&mut rng, cfg.stage_channels, 16);

        let mut g = Graph::new(&params);
        let vars = stages.clone().map(|t| g.input(t));
        let out = fpn.forward(&mut g, vars).unwrap();

        let p = |name: &str| params.get(params.find(name).unwrap());
        let lat = |i: usize| {
            ops::conv2d(&stages[i - 2], p(&format!("fpn.lateral{i}.weight")), p(&format!("fpn.lateral{i}.bias")), 1, 0).unwrap()
        };
        let smooth = |i: usize, x: &Tensor| {
            ops::conv2d(x, p(&format!("fpn.output{i}.weight")), p(&format!("fpn.output{i}.bias")), 1, 1).unwrap()
        };
        let m5 = lat(5);
        let m4 = lat(4).add(&ops::bilinear_upsample(&m5, 2).unwrap()).unwrap();
        let m3 = lat(3).add(&ops::bilinear_upsample(&m4, 2).unwrap()).unwrap();
        let m2 = lat(2).add(&ops::bilinear_upsample(&m3, 2).unwrap()).unwrap();
        let expected = [smooth(2, &m2), smooth(3, &m3), smooth(4, &m4), smooth(5, &m5)];
        for (v, e) in out.iter().zip(&expected) {
            assert!(g.value(*v).max_abs_diff(e).unwrap() < 1e-12);
        }
    }

    #[test]
    fn fpn_dataflow_and_zero_input() {
        let cfg = BackboneConfig {
            stem_channels: 2,
            stage_channels: [2, 3, 4, 5],
            convs_per_stage: 1,
        };
        let (params, _, fpn) = build(4, &cfg, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let stages = random_stages(&mut rng, cfg.stage_channels, 16);
        let run = |stages: [Tensor; 4]| {
            let mut g = Graph::new(&params);
            let vars = stages.map(|t| g.input(t));
            let out = fpn.forward(&mut g, vars).unwrap();
            out.map(|v| g.value(v).clone())
        };
        let full = run(stages.clone());
        let mut zeroed = stages.clone();
        for s in zeroed.iter_mut().take(3) {
            *s = Tensor::zeros(s.shape());
        }
        assert_eq!(run(zeroed)[3], full[3]);

        let zeros = stages.clone().map(|t| Tensor::zeros(t.shape()));
        for level in run(zeros) {
            assert!(level.data().iter().all(|&v| v == 0.0));
        }

        let mut g = Graph::new(&params);
        let mut bad = stages.clone();
        bad[2] = Tensor::zeros(&[4, 3, 3]);
        let vars = bad.map(|t| g.input(t));
        assert!(matches!(fpn.forward(&mut g, vars), Err(Error::Shape { .. })));
    }

    #[test]
    fn fpn_gradient_check() {
        let cfg = BackboneConfig {
            stem_channels: 2,
            stage_channels: [2, 2, 3, 3],
            convs_per_stage: 1,
        };
        for seed in 0..5 {
            let (params, _, fpn) = build(20 + seed, &cfg, 2);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let stages = random_stages(&mut rng, cfg.stage_channels, 8);
            let weights: Vec<Tensor> = (0..4)
                .map(|i| Tensor::rand_uniform(&[2, 8 >> i, 8 >> i], -1.0, 1.0, &mut rng))
                .collect();
            // Differentiate with respect to the finest stage; the others are constants.
            let err = grad_check(
                |t: &mut Tape, x| {
                    let mut g = Graph::new(&params);
                    std::mem::swap(&mut g.tape, t);
                    let vars = [
                        x,
                        g.input(stages[1].clone()),
                        g.input(stages[2].clone()),
                        g.input(stages[3].clone()),
                    ];
                    let out = fpn.forward(&mut g, vars)?;
                    let mut total = None;
                    for (v, w) in out.iter().zip(&weights) {
                        let w = g.input(w.clone());
                        let p = g.tape.mul(*v, w)?;
                        let s = g.tape.sum(p);
                        total = Some(match total {
                            None => s,
                            Some(acc) => g.tape.add(acc, s)?,
                        });
                    }
                    std::mem::swap(&mut g.tape, t);
                    Ok(total.unwrap())
                },
                &stages[0],
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-6, "seed {seed}: {err}");
        }
    }

    #[test]
    fn extraction_is_the_manual_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let levels: [Tensor; 4] = std::array::from_fn(|i| Tensor::rand_uniform(&[3, 32 >> i, 32 >> i], -1.0, 1.0, &mut rng));
        let pyr = FeaturePyramid::new(levels).unwrap();
        let b = BoundingBox::new(20.0, 30.0, 70.0, 110.0).unwrap();
        for strategy in [LevelStrategy::FIXED_P2, LevelStrategy::Fixed(4), LevelStrategy::SizeBased { k0: 4, canonical: 40.0 }] {
            let cfg = ExtractionConfig {
                strategy,
                magnification: 1.3,
                ..Default::default()
            };
            let (feat, enlarged) = extract_person_features(&pyr, &b, &cfg).unwrap();
            let manual_box = enlarge_box(&b, 1.3).unwrap();
            let level = select_level(&manual_box, &strategy);
            let manual = roi_align(
                pyr.level(level),
                &manual_box,
                &RoiAlignSpec::new(1.0 / (1u32 << level) as f64, (14, 14), 2),
            )
            .unwrap();
            assert_eq!(feat, manual);
            assert_eq!(enlarged, manual_box);
        }
        // Magnification 1.0 leaves the box untouched.
        let cfg = ExtractionConfig {
            strategy: LevelStrategy::size_based(),
            magnification: 1.0,
            ..Default::default()
        };
        let (_, unchanged) = extract_person_features(&pyr, &b, &cfg).unwrap();
        assert_eq!(unchanged, b);
    }
}
