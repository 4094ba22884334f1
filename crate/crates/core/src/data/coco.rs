//! COCO person-keypoint annotation files.

use std::collections::BTreeMap;
use std::path::Path;

use serde_json::{json, Map, Value};

use crate::data::{Annotation, Dataset, ImageRecord};
use crate::error::{Error, Result};
use crate::geometry::{BoundingBox, ImageSize};
use crate::keypoints::{KeypointSet, KEYPOINT_NAMES, NUM_KEYPOINTS};

/// COCO person skeleton (1-based keypoint indices).
pub const SKELETON: [[usize; 2]; 19] = [
    [16, 14], [14, 12], [17, 15], [15, 13], [12, 13], [6, 12], [7, 13], [6, 7], [6, 8], [7, 9],
    [8, 10], [9, 11], [2, 3], [1, 2], [1, 3], [2, 4], [3, 5], [4, 6], [5, 7],
];

fn schema(path: impl Into<String>, reason: impl Into<String>) -> Error {
    Error::Schema {
        path: path.into(),
        reason: reason.into(),
    }
}

fn field<'a>(obj: &'a Value, path: &str, key: &str) -> Result<&'a Value> {
    obj.get(key).ok_or_else(|| schema(format!("{path}.{key}"), "missing field"))
}

fn as_array<'a>(v: &'a Value, path: &str) -> Result<&'a Vec<Value>> {
    v.as_array().ok_or_else(|| schema(path, "expected an array"))
}

fn as_u64(v: &Value, path: &str) -> Result<u64> {
    v.as_u64().ok_or_else(|| schema(path, "expected a non-negative integer"))
}

fn as_f64(v: &Value, path: &str) -> Result<f64> {
    v.as_f64().ok_or_else(|| schema(path, "expected a number"))
}

fn numbers(v: &Value, path: &str, len: usize) -> Result<Vec<f64>> {
    let arr = as_array(v, path)?;
    if arr.len() != len {
        return Err(schema(path, format!("expected {len} numbers, found {}", arr.len())));
    }
    arr.iter().enumerate().map(|(i, x)| as_f64(x, &format!("{path}[{i}]"))).collect()
}

pub fn load_coco_json(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let value: Value = serde_json::from_str(&text).map_err(|e| schema("$", format!("invalid JSON: {e}")))?;
    parse_coco(&value)
}

/// Person category id: the category named "person", or 1 when the file
/// lists no categories.
fn person_category(root: &Value) -> Result<u64> {
    let Some(cats) = root.get("categories") else {
        return Ok(1);
    };
    for (i, c) in as_array(cats, "$.categories")?.iter().enumerate() {
        let path = format!("$.categories[{i}]");
        if field(c, &path, "name")?.as_str() == Some("person") {
            return as_u64(field(c, &path, "id")?, &format!("{path}.id"));
        }
    }
    Err(schema("$.categories", "no category named \"person\""))
}

/// Converts bboxes from xywh, drops non-person and keypoint-less annotations.
pub fn parse_coco(root: &Value) -> Result<Dataset> {
    let person = person_category(root)?;
    let mut images = Vec::new();
    let mut by_id = BTreeMap::new();
    for (i, img) in as_array(field(root, "$", "images")?, "$.images")?.iter().enumerate() {
        let path = format!("$.images[{i}]");
        let id = as_u64(field(img, &path, "id")?, &format!("{path}.id"))?;
        let width = as_u64(field(img, &path, "width")?, &format!("{path}.width"))? as usize;
        let height = as_u64(field(img, &path, "height")?, &format!("{path}.height"))? as usize;
        let size = ImageSize::new(width, height).map_err(|e| schema(&path, e.to_string()))?;
        let file_name = img.get("file_name").and_then(Value::as_str).unwrap_or_default().to_string();
        if by_id.insert(id, images.len()).is_some() {
            return Err(schema(format!("{path}.id"), format!("duplicate image id {id}")));
        }
        images.push(ImageRecord {
            id,
            size,
            file_name,
            pixels: None,
            annotations: Vec::new(),
        });
    }
    for (i, ann) in as_array(field(root, "$", "annotations")?, "$.annotations")?.iter().enumerate() {
        let path = format!("$.annotations[{i}]");
        let category = match ann.get("category_id") {
            Some(c) => as_u64(c, &format!("{path}.category_id"))?,
            None => person,
        };
        if category != person {
            continue;
        }
        let id = as_u64(field(ann, &path, "id")?, &format!("{path}.id"))?;
        let image_id = as_u64(field(ann, &path, "image_id")?, &format!("{path}.image_id"))?;
        let flat = numbers(field(ann, &path, "keypoints")?, &format!("{path}.keypoints"), NUM_KEYPOINTS * 3)?;
        let keypoints = KeypointSet::from_coco_flat(&flat).map_err(|e| schema(format!("{path}.keypoints"), e.to_string()))?;
        let labeled = match ann.get("num_keypoints") {
            Some(n) => as_u64(n, &format!("{path}.num_keypoints"))? as usize,
            None => keypoints.num_labeled(),
        };
        if labeled == 0 || keypoints.num_labeled() == 0 {
            continue;
        }
        let xywh = numbers(field(ann, &path, "bbox")?, &format!("{path}.bbox"), 4)?;
        let bbox = BoundingBox::from_xywh(xywh[0], xywh[1], xywh[2], xywh[3]).map_err(|e| schema(format!("{path}.bbox"), e.to_string()))?;
        let area = match ann.get("area") {
            Some(a) => as_f64(a, &format!("{path}.area"))?,
            None => bbox.area(),
        };
        if !(area > 0.0) {
            return Err(schema(format!("{path}.area"), "area must be positive"));
        }
        let &slot = by_id
            .get(&image_id)
            .ok_or_else(|| schema(format!("{path}.image_id"), format!("unknown image id {image_id}")))?;
        if !bbox.intersects(images[slot].size) {
            return Err(schema(format!("{path}.bbox"), "box does not intersect its image"));
        }
        images[slot].annotations.push(Annotation {
            id,
            bbox,
            keypoints,
            area,
        });
    }
    Ok(Dataset { images })
}

/// COCO keypoint JSON for a dataset (boxes written as xywh).
pub fn to_coco_json(dataset: &Dataset) -> Value {
    let images: Vec<Value> = dataset
        .images
        .iter()
        .map(|img| {
            json!({
                "id": img.id,
                "width": img.size.width,
                "height": img.size.height,
                "file_name": img.file_name,
            })
        })
        .collect();
    let annotations: Vec<Value> = dataset
        .images
        .iter()
        .flat_map(|img| {
            img.annotations.iter().map(move |a| {
                let mut m = Map::new();
                m.insert("id".into(), json!(a.id));
                m.insert("image_id".into(), json!(img.id));
                m.insert("category_id".into(), json!(1));
                m.insert("keypoints".into(), json!(a.keypoints.to_coco_flat()));
                m.insert("num_keypoints".into(), json!(a.keypoints.num_labeled()));
                m.insert("bbox".into(), json!([a.bbox.x1, a.bbox.y1, a.bbox.width(), a.bbox.height()]));
                m.insert("area".into(), json!(a.area));
                m.insert("iscrowd".into(), json!(0));
                Value::Object(m)
            })
        })
        .collect();
    json!({
        "images": images,
        "annotations": annotations,
        "categories": [{
            "id": 1,
            "name": "person",
            "supercategory": "person",
            "keypoints": KEYPOINT_NAMES,
            "skeleton": SKELETON,
        }],
    })
}
