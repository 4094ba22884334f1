//! Dataset files written by `gen-data` and the loaders behind every command.

use std::path::Path;

use refpose::data::image::{read_png, resize_record};
use refpose::data::synth::edge_fraction;
use refpose::data::tensorfile::sha256_hex;
use refpose::data::{load_coco_json, parse_coco, synth_generate, to_coco_json, Dataset, SynthConfig, TensorFile};
use refpose::Error;
use serde::{Deserialize, Serialize};

use crate::config::{DataConfig, DataSource};
use crate::output::OutputDir;
use crate::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const ANNOTATIONS_FILE: &str = "annotations.json";
pub const IMAGES_FILE: &str = "images.tensors";
pub const MANIFEST_FORMAT: &str = "refpose-dataset";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub num_images: usize,
    pub num_annotations: usize,
    /// Fraction of figures with a keypoint within 5% of their box border.
    pub edge_fraction: f64,
    pub annotations_sha256: String,
    pub images_sha256: String,
    pub synth: SynthConfig,
}

/// Writes annotations, pixels and the manifest; returns the manifest.
pub fn write_dataset(out: &mut OutputDir, dataset: &Dataset, synth: &SynthConfig) -> Result<Manifest, CliError> {
    let mut ann = serde_json::to_string(&to_coco_json(dataset)).map_err(|e| CliError::Output(e.to_string()))?;
    ann.push('\n');
    let images = dataset.pixels_file()?.to_bytes();
    out.write(ANNOTATIONS_FILE, ann.as_bytes())?;
    out.write(IMAGES_FILE, &images)?;
    let manifest = Manifest {
        format: MANIFEST_FORMAT.into(),
        version: MANIFEST_VERSION,
        num_images: dataset.images.len(),
        num_annotations: dataset.num_annotations(),
        edge_fraction: edge_fraction(dataset),
        annotations_sha256: sha256_hex(ann.as_bytes()),
        images_sha256: sha256_hex(&images),
        synth: synth.clone(),
    };
    out.write_json(MANIFEST_FILE, &manifest)?;
    Ok(manifest)
}

/// Loads a `gen-data` directory, verifying the manifest checksums.
pub fn read_dataset(dir: &Path) -> Result<Dataset, CliError> {
    let read = |name: &str| std::fs::read(dir.join(name)).map_err(|e| CliError::Core(Error::Io { path: dir.join(name), source: e }));
    let corrupt = |name: &str, reason: String| CliError::Core(Error::Corrupt { path: dir.join(name), reason });
    let manifest: Manifest =
        serde_json::from_slice(&read(MANIFEST_FILE)?).map_err(|e| corrupt(MANIFEST_FILE, e.to_string()))?;
    if manifest.format != MANIFEST_FORMAT {
        return Err(corrupt(MANIFEST_FILE, format!("unexpected format {:?}", manifest.format)));
    }
    if manifest.version != MANIFEST_VERSION {
        return Err(CliError::Core(Error::VersionMismatch {
            expected: MANIFEST_VERSION.to_string(),
            found: manifest.version.to_string(),
        }));
    }
    let ann = read(ANNOTATIONS_FILE)?;
    if sha256_hex(&ann) != manifest.annotations_sha256 {
        return Err(corrupt(ANNOTATIONS_FILE, "checksum differs from manifest".into()));
    }
    let images = read(IMAGES_FILE)?;
    if sha256_hex(&images) != manifest.images_sha256 {
        return Err(corrupt(IMAGES_FILE, "checksum differs from manifest".into()));
    }
    let value: serde_json::Value = serde_json::from_slice(&ann).map_err(|e| corrupt(ANNOTATIONS_FILE, e.to_string()))?;
    let mut dataset = parse_coco(&value)?;
    dataset.attach_pixels(&TensorFile::from_bytes(&images, &dir.join(IMAGES_FILE))?)?;
    if dataset.images.len() != manifest.num_images || dataset.num_annotations() != manifest.num_annotations {
        return Err(corrupt(MANIFEST_FILE, "counts differ from the dataset files".into()));
    }
    Ok(dataset)
}

fn load_coco(cfg: &DataConfig) -> Result<Dataset, CliError> {
    let ann = cfg.annotations.as_ref().ok_or_else(|| CliError::Config("data.annotations is required for COCO data".into()))?;
    let mut dataset = load_coco_json(ann)?;
    if let Some(n) = cfg.max_images {
        dataset = dataset.head(n);
    }
    let dir = cfg
        .images_dir
        .clone()
        .or_else(|| ann.parent().map(Path::to_path_buf))
        .unwrap_or_default();
    for img in &mut dataset.images {
        let pixels = read_png(&dir.join(&img.file_name))?;
        let (_, h, w) = pixels.dims3()?;
        if (w, h) != (img.size.width, img.size.height) {
            return Err(CliError::Core(Error::Data(format!(
                "{}: image is {w}x{h}, annotations say {}x{}",
                img.file_name, img.size.width, img.size.height
            ))));
        }
        img.pixels = Some(pixels);
        if let Some(r) = cfg.resize {
            *img = resize_record(img, r.shorter, r.max_longer)?;
        }
    }
    Ok(dataset)
}

/// The dataset named by the config, with pixels attached.
pub fn load_dataset(cfg: &DataConfig) -> Result<Dataset, CliError> {
    let dataset = match (cfg.source, &cfg.dataset_dir) {
        (DataSource::Coco, _) => return load_coco(cfg),
        (DataSource::Synth, Some(dir)) => read_dataset(dir)?,
        (DataSource::Synth, None) => synth_generate(&cfg.synth)?,
    };
    Ok(match cfg.max_images {
        Some(n) => dataset.head(n),
        None => dataset,
    })
}

/// `(train, eval)`: with a holdout of zero both are the whole dataset.
pub fn split(dataset: Dataset, holdout: usize) -> Result<(Dataset, Dataset), CliError> {
    if holdout == 0 {
        return Ok((dataset.clone(), dataset));
    }
    let n = dataset.images.len();
    if holdout >= n {
        return Err(CliError::Config(format!("data.holdout {holdout} leaves no training images out of {n}")));
    }
    let mut train = dataset;
    let eval = Dataset {
        images: train.images.split_off(n - holdout),
    };
    Ok((train, eval))
}
