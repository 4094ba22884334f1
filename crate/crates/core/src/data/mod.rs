//! Datasets: COCO keypoint JSON, the synthetic stick-figure generator,
//! flip augmentation, image files, and checkpoint persistence.

pub mod augment;
pub mod checkpoint;
pub mod coco;
pub mod image;
pub mod synth;
pub mod tensorfile;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::GroundTruth;
use crate::geometry::{BoundingBox, ImageSize};
use crate::keypoints::KeypointSet;
use crate::tensor::Tensor;

pub use augment::augment;
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use coco::{load_coco_json, parse_coco, to_coco_json};
pub use synth::{synth_generate, ScaleMix, SynthConfig};
pub use tensorfile::TensorFile;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub id: u64,
    pub bbox: BoundingBox,
    pub keypoints: KeypointSet,
    /// Instance area used to normalize OKS and miss radii.
    pub area: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageRecord {
    pub id: u64,
    pub size: ImageSize,
    pub file_name: String,
    /// `3×H×W` in [0, 1]; absent until pixels are attached.
    pub pixels: Option<Tensor>,
    pub annotations: Vec<Annotation>,
}

impl ImageRecord {
    pub fn pixels(&self) -> Result<&Tensor> {
        self.pixels
            .as_ref()
            .ok_or_else(|| Error::Data(format!("image {} has no pixels loaded", self.id)))
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub images: Vec<ImageRecord>,
}

impl Dataset {
    pub fn num_annotations(&self) -> usize {
        self.images.iter().map(|i| i.annotations.len()).sum()
    }

    pub fn ground_truths(&self) -> Vec<GroundTruth> {
        self.images
            .iter()
            .flat_map(|img| {
                img.annotations.iter().map(|a| GroundTruth {
                    image_id: img.id,
                    id: a.id,
                    keypoints: a.keypoints,
                    area: a.area,
                })
            })
            .collect()
    }

    /// The first `n` images.
    pub fn head(&self, n: usize) -> Dataset {
        Dataset {
            images: self.images.iter().take(n).cloned().collect(),
        }
    }

    /// Pixels of every image as one tensor container, keyed by image id.
    pub fn pixels_file(&self) -> Result<TensorFile> {
        let tensors = self
            .images
            .iter()
            .map(|img| Ok((format!("image/{}", img.id), img.pixels()?.clone())))
            .collect::<Result<_>>()?;
        Ok(TensorFile {
            meta: serde_json::json!({ "kind": "images" }),
            tensors,
        })
    }

    /// Attaches pixels from a container written by [`Dataset::pixels_file`].
    pub fn attach_pixels(&mut self, file: &TensorFile) -> Result<()> {
        for img in &mut self.images {
            let name = format!("image/{}", img.id);
            let t = file.get(&name).ok_or_else(|| Error::MissingTensor(name.clone()))?;
            let (c, h, w) = t.dims3()?;
            if c != 3 || h != img.size.height || w != img.size.width {
                return Err(Error::TensorShape {
                    name,
                    expected: vec![3, img.size.height, img.size.width],
                    found: t.shape().to_vec(),
                });
            }
            img.pixels = Some(t.clone());
        }
        Ok(())
    }
}
