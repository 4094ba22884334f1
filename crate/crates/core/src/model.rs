//! The full pose model: backbone, FPN, person feature extraction and
//! keypoint head, plus dataset-level prediction and evaluation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::data::{Dataset, ImageRecord};
use crate::data::image::pad_to_multiple;
use crate::error::{Error, Result};
use crate::eval::{ap_eval, EvalParams, EvalReport, Prediction, SigmaTable};
use crate::geometry::{jitter_box, BoundingBox};
use crate::head::{decode_heatmaps, HeadConfig, KeypointHead};
use crate::keypoints::KeypointSet;
use crate::params::{Graph, ParamSet};
use crate::pyramid::{
    extract_person_features, extract_person_features_var, Backbone, BackboneConfig, ExtractionConfig, FeaturePyramid, Fpn,
    LevelStrategy, INPUT_MULTIPLE,
};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub fpn_channels: usize,
    pub head: HeadConfig,
    pub level_strategy: LevelStrategy,
    pub magnification: f64,
    pub roi_size: usize,
    pub sampling_ratio: usize,
    /// Seed of the weight initialization.
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            fpn_channels: 32,
            head: HeadConfig::default(),
            level_strategy: LevelStrategy::FIXED_P2,
            magnification: 1.3,
            roi_size: 14,
            sampling_ratio: 2,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.head.validate()?;
        self.level_strategy.validate()?;
        if self.fpn_channels == 0 || self.roi_size == 0 || self.sampling_ratio == 0 {
            return Err(Error::invalid("model", "fpn_channels, roi_size and sampling_ratio must be positive"));
        }
        if !(self.magnification >= 1.0) {
            return Err(Error::invalid("model", format!("magnification {} below 1", self.magnification)));
        }
        Ok(())
    }

    pub fn extraction(&self) -> ExtractionConfig {
        ExtractionConfig {
            strategy: self.level_strategy,
            magnification: self.magnification,
            output_size: self.roi_size,
            sampling_ratio: self.sampling_ratio,
        }
    }
}

/// Parameters owned by the backbone or the FPN.
pub fn is_backbone_param(name: &str) -> bool {
    name.starts_with("backbone.") || name.starts_with("fpn.")
}

#[derive(Clone, Debug)]
pub struct PoseModel {
    config: ModelConfig,
    pub params: ParamSet,
    backbone: Backbone,
    fpn: Fpn,
    head: KeypointHead,
}

impl PoseModel {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut params = ParamSet::new();
        let backbone = Backbone::new(&mut params, &config.backbone, &mut rng)?;
        let fpn = Fpn::new(&mut params, &config.backbone.stage_channels, config.fpn_channels, &mut rng);
        let head = KeypointHead::new(&mut params, &config.head, config.fpn_channels, config.roi_size, &mut rng)?;
        Ok(Self {
            config: config.clone(),
            params,
            backbone,
            fpn,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn head(&self) -> &KeypointHead {
        &self.head
    }

    pub fn extraction(&self) -> ExtractionConfig {
        self.config.extraction()
    }

    /// Pads the image and records backbone + FPN on `g`.
    pub fn pyramid_vars(&self, g: &mut Graph<'_>, image: &Tensor) -> Result<[Var; 4]> {
        let x = g.input(pad_to_multiple(image, INPUT_MULTIPLE)?);
        let stages = self.backbone.forward(g, x)?;
        self.fpn.forward(g, stages)
    }

    pub fn pyramid(&self, image: &Tensor) -> Result<FeaturePyramid> {
        let mut g = Graph::new(&self.params);
        let levels = self.pyramid_vars(&mut g, image)?;
        FeaturePyramid::new(levels.map(|v| g.value(v).clone()))
    }

    /// Heatmap logits for the person in `b`, recorded on `g`, and the box the
    /// heatmap spans.
    pub fn person_logits(&self, g: &mut Graph<'_>, pyramid: &[Var; 4], b: &BoundingBox, ext: &ExtractionConfig) -> Result<(Var, BoundingBox)> {
        let (features, region) = extract_person_features_var(g, pyramid, b, ext)?;
        Ok((self.head.forward(g, features)?, region))
    }

    /// Decoded keypoints and an instance score (mean keypoint confidence)
    /// per box.
    pub fn predict_boxes(&self, pyramid: &FeaturePyramid, boxes: &[BoundingBox], ext: &ExtractionConfig) -> Result<Vec<(KeypointSet, f64)>> {
        boxes
            .iter()
            .map(|b| {
                let (features, region) = extract_person_features(pyramid, b, ext)?;
                let mut g = Graph::new(&self.params);
                let x = g.input(features);
                let logits = self.head.forward(&mut g, x)?;
                let kps = decode_heatmaps(g.value(logits), &region)?;
                let score = kps.iter().map(|k| k.score).sum::<f64>() / kps.0.len() as f64;
                Ok((kps, score))
            })
            .collect()
    }
}

/// How person boxes are produced and scored at evaluation time.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub sigmas: SigmaTable,
    /// PCK radius as a fraction of `√gt_area`.
    pub pck_alpha: f64,
    /// Miss radius as a fraction of `√gt_area`.
    pub radius_factor: f64,
    /// Proposal noise applied to ground-truth boxes.
    pub jitter_scale: f64,
    pub jitter_shift: f64,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        let p = EvalParams::default();
        Self {
            sigmas: p.sigmas,
            pck_alpha: p.pck_alpha,
            radius_factor: p.radius_factor,
            jitter_scale: 0.1,
            jitter_shift: 0.05,
            seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn params(&self) -> EvalParams {
        EvalParams {
            sigmas: self.sigmas,
            pck_alpha: self.pck_alpha,
            radius_factor: self.radius_factor,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.params().validate()?;
        for (name, v) in [("jitter_scale", self.jitter_scale), ("jitter_shift", self.jitter_shift)] {
            if !(0.0..=0.5).contains(&v) {
                return Err(Error::invalid("eval", format!("{name} {v} outside [0, 0.5]")));
            }
        }
        Ok(())
    }
}

/// Jittered ground-truth boxes, one per annotation. Image `i` draws from
/// its own stream, so proposals do not depend on dataset order or threads.
pub fn jittered_proposals(dataset: &Dataset, scale: f64, shift: f64, seed: u64) -> Result<Vec<Vec<BoundingBox>>> {
    dataset
        .images
        .iter()
        .map(|img| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(img.id);
            img.annotations.iter().map(|a| jitter_box(&a.bbox, scale, shift, &mut rng)).collect()
        })
        .collect()
}

fn predict_image(model: &PoseModel, img: &ImageRecord, boxes: &[BoundingBox], ext: &ExtractionConfig) -> Result<Vec<Prediction>> {
    if boxes.is_empty() {
        return Ok(Vec::new());
    }
    let pyramid = model.pyramid(img.pixels()?)?;
    let out = model.predict_boxes(&pyramid, boxes, ext)?;
    Ok(img
        .annotations
        .iter()
        .zip(boxes)
        .zip(out)
        .map(|((a, b), (keypoints, score))| Prediction {
            image_id: img.id,
            id: a.id,
            keypoints,
            score,
            area: b.area(),
        })
        .collect())
}

/// One prediction per proposal, in dataset order.
pub fn predict_dataset(model: &PoseModel, dataset: &Dataset, proposals: &[Vec<BoundingBox>], ext: &ExtractionConfig) -> Result<Vec<Prediction>> {
    if proposals.len() != dataset.images.len() {
        return Err(Error::shape("predict_dataset", "proposal lists", dataset.images.len(), proposals.len()));
    }
    let work = |(img, boxes): (&ImageRecord, &Vec<BoundingBox>)| predict_image(model, img, boxes, ext);
    #[cfg(feature = "parallel")]
    let per_image: Vec<Result<Vec<Prediction>>> = {
        use rayon::prelude::*;
        dataset.images.par_iter().zip(proposals.par_iter()).map(work).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let per_image: Vec<Result<Vec<Prediction>>> = dataset.images.iter().zip(proposals).map(work).collect();
    let mut out = Vec::new();
    for p in per_image {
        out.extend(p?);
    }
    Ok(out)
}

/// Predicts from jittered ground-truth boxes and scores against the annotations.
pub fn evaluate(model: &PoseModel, dataset: &Dataset, ext: &ExtractionConfig, cfg: &EvalConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let proposals = jittered_proposals(dataset, cfg.jitter_scale, cfg.jitter_shift, cfg.seed)?;
    let predictions = predict_dataset(model, dataset, &proposals, ext)?;
    ap_eval(&predictions, &dataset.ground_truths(), &cfg.params())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{synth_generate, SynthConfig};
    use crate::head::HeadVariant;

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            backbone: BackboneConfig {
                stem_channels: 4,
                stage_channels: [4, 4, 8, 8],
                convs_per_stage: 1,
            },
            fpn_channels: 8,
            head: HeadConfig {
                variant: HeadVariant::GcmSeries,
                head_channels: 8,
                heads: 2,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn predictions_cover_every_annotation() {
        let d = synth_generate(&SynthConfig { num_images: 3, image_size: 64, ..Default::default() }).unwrap();
        let model = PoseModel::new(&tiny_config()).unwrap();
        let proposals = jittered_proposals(&d, 0.1, 0.05, 1).unwrap();
        let preds = predict_dataset(&model, &d, &proposals, &model.extraction()).unwrap();
        assert_eq!(preds.len(), d.num_annotations());
        for p in &preds {
            assert!(p.score > 0.0 && p.score <= 1.0);
        }
        let r = evaluate(&model, &d, &model.extraction(), &EvalConfig::default()).unwrap();
        assert!((0.0..=1.0).contains(&r.ap_mean));
    }

    #[test]
    fn proposals_depend_only_on_seed_and_image() {
        let d = synth_generate(&SynthConfig { num_images: 4, image_size: 64, ..Default::default() }).unwrap();
        let a = jittered_proposals(&d, 0.1, 0.05, 5).unwrap();
        let b = jittered_proposals(&Dataset { images: d.images[2..].to_vec() }, 0.1, 0.05, 5).unwrap();
        assert_eq!(a[2..], b[..]);
        let zero = jittered_proposals(&d, 0.0, 0.0, 5).unwrap();
        assert_eq!(zero[0][0], d.images[0].annotations[0].bbox);
    }

    #[test]
    fn same_init_seed_same_weights() {
        let a = PoseModel::new(&tiny_config()).unwrap();
        let b = PoseModel::new(&tiny_config()).unwrap();
        assert_eq!(a.params, b.params);
        let c = PoseModel::new(&ModelConfig { init_seed: 1, ..tiny_config() }).unwrap();
        assert_ne!(a.params, c.params);
    }
}
