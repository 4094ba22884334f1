//! Horizontal flip augmentation.

use rand::Rng;

use crate::data::{Annotation, ImageRecord};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn flip_columns(t: &Tensor) -> Result<Tensor> {
    let (c, h, w) = t.dims3()?;
    let src = t.data();
    let mut out = vec![0.0; src.len()];
    for row in 0..c * h {
        let base = row * w;
        for x in 0..w {
            out[base + x] = src[base + w - 1 - x];
        }
    }
    Tensor::new(&[c, h, w], out)
}

/// Mirrors pixels, boxes and keypoints, swapping left/right channels.
pub fn flip_record(record: &ImageRecord) -> Result<ImageRecord> {
    let width = record.size.width as f64;
    let pixels = record.pixels.as_ref().map(flip_columns).transpose()?;
    let annotations = record
        .annotations
        .iter()
        .map(|a| Annotation {
            id: a.id,
            bbox: a.bbox.flipped(width),
            keypoints: a.keypoints.flipped(width),
            area: a.area,
        })
        .collect();
    Ok(ImageRecord {
        pixels,
        annotations,
        ..record.clone()
    })
}

/// Flips the record with probability `flip_probability`.
pub fn augment<R: Rng + ?Sized>(record: &ImageRecord, flip_probability: f64, rng: &mut R) -> Result<ImageRecord> {
    if !(0.0..=1.0).contains(&flip_probability) {
        return Err(Error::invalid("flip_probability", format!("{flip_probability} outside [0, 1]")));
    }
    if rng.gen_bool(flip_probability) {
        flip_record(record)
    } else {
        Ok(record.clone())
    }
}
