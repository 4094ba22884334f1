//! PNG images for real-data mode, the optional shorter-side resize and
//! padding to the backbone input multiple.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use crate::data::{Annotation, ImageRecord};
use crate::error::{Error, Result};
use crate::geometry::{BoundingBox, ImageSize};
use crate::tensor::Tensor;

/// Reads a PNG as `3×H×W` in [0, 1]. Gray images are replicated to three
/// channels and alpha is dropped.
pub fn read_png(path: &Path) -> Result<Tensor> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(std::io::BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND);
    let bad = |e: png::DecodingError| Error::Data(format!("{}: {e}", path.display()));
    let mut reader = decoder.read_info().map_err(bad)?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(bad)?;
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = info.color_type.samples();
    let sixteen = info.bit_depth == png::BitDepth::Sixteen;
    let sample = |i: usize| -> f64 {
        if sixteen {
            u16::from_be_bytes([buf[2 * i], buf[2 * i + 1]]) as f64 / 65535.0
        } else {
            buf[i] as f64 / 255.0
        }
    };
    let plane = h * w;
    let mut data = vec![0.0; 3 * plane];
    for p in 0..plane {
        for c in 0..3 {
            let src = if channels >= 3 { c } else { 0 };
            data[c * plane + p] = sample(p * channels + src);
        }
    }
    Tensor::new(&[3, h, w], data)
}

/// Writes a `3×H×W` tensor as 8-bit RGB, clamping to [0, 1].
pub fn write_png(path: &Path, image: &Tensor) -> Result<()> {
    let (c, h, w) = image.dims3()?;
    if c != 3 {
        return Err(Error::shape("write_png", "channels", 3, c));
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    encoder.set_color(png::ColorType::Rgb);
    encoder.set_depth(png::BitDepth::Eight);
    let plane = h * w;
    let d = image.data();
    let bytes: Vec<u8> = (0..plane)
        .flat_map(|p| (0..3).map(move |ch| (d[ch * plane + p].clamp(0.0, 1.0) * 255.0).round() as u8))
        .collect();
    let fail = |e: png::EncodingError| Error::Data(format!("{}: {e}", path.display()));
    let mut writer = encoder.write_header().map_err(fail)?;
    writer.write_image_data(&bytes).map_err(fail)?;
    writer.finish().map_err(fail)
}

/// Bilinear resize with half-pixel centers and edge clamping.
pub fn resize_bilinear(image: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (c, h, w) = image.dims3()?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid("resize", "output size must be positive"));
    }
    let taps = |out: usize, inp: usize| -> Vec<(usize, usize, f64)> {
        let scale = inp as f64 / out as f64;
        (0..out)
            .map(|o| {
                let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(inp - 1);
                (i0, i1, s - i0 as f64)
            })
            .collect()
    };
    let (ty, tx) = (taps(out_h, h), taps(out_w, w));
    let src = image.data();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let p = &src[ch * h * w..(ch + 1) * h * w];
        for &(y0, y1, fy) in &ty {
            for &(x0, x1, fx) in &tx {
                let top = p[y0 * w + x0] * (1.0 - fx) + p[y0 * w + x1] * fx;
                let bot = p[y1 * w + x0] * (1.0 - fx) + p[y1 * w + x1] * fx;
                out.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    Tensor::new(&[c, out_h, out_w], out)
}

/// Scale that brings the shorter side to `shorter` unless the longer side
/// would then exceed `max_longer`.
pub fn resize_scale(size: ImageSize, shorter: usize, max_longer: usize) -> f64 {
    let (s, l) = (size.width.min(size.height) as f64, size.width.max(size.height) as f64);
    let scale = shorter as f64 / s;
    if l * scale > max_longer as f64 {
        max_longer as f64 / l
    } else {
        scale
    }
}

/// Resizes pixels and rescales boxes, keypoints and areas accordingly.
pub fn resize_record(record: &ImageRecord, shorter: usize, max_longer: usize) -> Result<ImageRecord> {
    let scale = resize_scale(record.size, shorter, max_longer);
    let w = ((record.size.width as f64 * scale).round() as usize).max(1);
    let h = ((record.size.height as f64 * scale).round() as usize).max(1);
    let (sx, sy) = (w as f64 / record.size.width as f64, h as f64 / record.size.height as f64);
    let pixels = record.pixels.as_ref().map(|p| resize_bilinear(p, h, w)).transpose()?;
    let annotations = record
        .annotations
        .iter()
        .map(|a| {
            let b = &a.bbox;
            let mut keypoints = a.keypoints;
            for k in keypoints.0.iter_mut().filter(|k| k.visibility.is_labeled()) {
                k.x *= sx;
                k.y *= sy;
            }
            Ok(Annotation {
                id: a.id,
                bbox: BoundingBox::with_score(b.x1 * sx, b.y1 * sy, b.x2 * sx, b.y2 * sy, b.score)?,
                keypoints,
                area: a.area * sx * sy,
            })
        })
        .collect::<Result<_>>()?;
    Ok(ImageRecord {
        id: record.id,
        size: ImageSize::new(w, h)?,
        file_name: record.file_name.clone(),
        pixels,
        annotations,
    })
}

/// Zero-pads bottom and right so both sides are multiples of `multiple`.
pub fn pad_to_multiple(image: &Tensor, multiple: usize) -> Result<Tensor> {
    let (c, h, w) = image.dims3()?;
    let up = |v: usize| v.div_ceil(multiple) * multiple;
    let (ph, pw) = (up(h), up(w));
    if (ph, pw) == (h, w) {
        return Ok(image.clone());
    }
    let src = image.data();
    let mut out = vec![0.0; c * ph * pw];
    for ch in 0..c {
        for y in 0..h {
            let s = (ch * h + y) * w;
            let d = (ch * ph + y) * pw;
            out[d..d + w].copy_from_slice(&src[s..s + w]);
        }
    }
    Tensor::new(&[c, ph, pw], out)
}
