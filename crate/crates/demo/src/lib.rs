//! wasm-bindgen bindings for the static page in `www/`.

use refpose::eval::{oks, SigmaTable};
use refpose::geometry::{enlarge_box, BoundingBox};
use refpose::head::{parse_trunk_layers, receptive_field_of, ReceptiveField};
use refpose::keypoints::{Keypoint, KeypointSet, Visibility, NUM_KEYPOINTS};
use wasm_bindgen::prelude::*;

fn js_err(e: refpose::Error) -> JsValue {
    JsValue::from_str(&e.to_string())
}

/// Enlarged box as `[x1, y1, x2, y2]`.
#[wasm_bindgen]
pub fn enlarge(x1: f64, y1: f64, x2: f64, y2: f64, factor: f64) -> Result<Vec<f64>, JsValue> {
    let b = BoundingBox::new(x1, y1, x2, y2).map_err(js_err)?;
    let e = enlarge_box(&b, factor).map_err(js_err)?;
    Ok(vec![e.x1, e.y1, e.x2, e.y2])
}

/// Receptive field of a stack like `3:1,3:2,g` over an `extent`-wide input; `"global"` or a number.
#[wasm_bindgen]
pub fn receptive_field(stack: &str, extent: usize) -> Result<String, JsValue> {
    let layers = parse_trunk_layers(stack).map_err(js_err)?;
    Ok(match receptive_field_of(&layers, extent) {
        ReceptiveField::Finite(n) => n.to_string(),
        ReceptiveField::Global { .. } => "global".into(),
    })
}

/// OKS of a prediction that shifts every keypoint by `(dx, dy)` pixels, for an object of `area` px².
#[wasm_bindgen]
pub fn oks_for_shift(dx: f64, dy: f64, area: f64) -> Result<f64, JsValue> {
    let mut gt = KeypointSet::default();
    let mut pred = KeypointSet::default();
    for k in 0..NUM_KEYPOINTS {
        let (x, y) = ((k % 5) as f64 * 10.0, (k / 5) as f64 * 10.0);
        gt.0[k] = Keypoint::labeled(x, y, Visibility::Visible);
        pred.0[k] = Keypoint::labeled(x + dx, y + dy, Visibility::Visible);
    }
    oks(&pred, &gt, area, &SigmaTable::default()).map_err(js_err)
}
