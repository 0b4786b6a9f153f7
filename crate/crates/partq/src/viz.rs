//! Diagnostics rendering: per-part quality overlays and attention heat maps.
//!
//! Outputs are plain PNGs plus a JSON sidecar with the numeric scores, so no
//! plotting stack is required to inspect a trained model.

use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::Serialize;

use crate::data::ReidSample;
use crate::error::{Error, Result};
use crate::model::ImageEmbedding;
use crate::Scalar;

#[derive(Debug, Serialize)]
struct ScoreSidecar {
    identity: i64,
    camera: u32,
    quality: Vec<f64>,
    /// Ground-truth occlusion fraction per part, when a mask exists.
    #[serde(skip_serializing_if = "Option::is_none")]
    occlusion_fraction: Option<Vec<f64>>,
}

fn to_rgb_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Write `<stem>_quality.png` (image with per-part tint: green = high score,
/// red = low), `<stem>_attention.png` (upsampled heat map) when available,
/// and `<stem>_scores.json`.
pub fn write_quality_overlay<F: Scalar>(
    sample: &ReidSample<F>,
    embedding: &ImageEmbedding<F>,
    out_dir: &Path,
    stem: &str,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir)?;
    let (h, w) = (sample.pixels.shape()[1], sample.pixels.shape()[2]);
    let k = embedding.quality.len();
    let mut outputs = Vec::new();

    // quality overlay: blend a red..green tint per horizontal part band
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        let part = (y * k / h).min(k - 1);
        let q = embedding.quality[part].to_f64().unwrap();
        for x in 0..w {
            let px = [0, 1, 2].map(|c| sample.pixels[[c, y, x]].to_f64().unwrap());
            let tint = [1.0 - q, q, 0.15];
            let blended = [0, 1, 2].map(|c| to_rgb_u8(0.65 * px[c] + 0.35 * tint[c]));
            img.put_pixel(x as u32, y as u32, image::Rgb(blended));
        }
    }
    // thin separator lines between parts
    for part in 1..k {
        let y = part * h / k;
        for x in 0..w {
            img.put_pixel(x as u32, y as u32, image::Rgb([255, 255, 255]));
        }
    }
    let quality_path = out_dir.join(format!("{stem}_quality.png"));
    img.save(&quality_path).map_err(|e| Error::format(e.to_string()))?;
    outputs.push(quality_path);

    if let Some(attention) = &embedding.attention {
        let path = out_dir.join(format!("{stem}_attention.png"));
        write_heat_map(attention, h, w, &path)?;
        outputs.push(path);
    }

    let sidecar = ScoreSidecar {
        identity: sample.identity,
        camera: sample.camera,
        quality: embedding
            .quality
            .iter()
            .map(|q| q.to_f64().unwrap())
            .collect(),
        occlusion_fraction: sample
            .mask
            .as_ref()
            .map(|m| crate::synth::part_occlusion_fractions(m, k)),
    };
    let json_path = out_dir.join(format!("{stem}_scores.json"));
    std::fs::write(
        &json_path,
        serde_json::to_string_pretty(&sidecar).map_err(|e| Error::Serde(e.to_string()))?,
    )?;
    outputs.push(json_path);
    Ok(outputs)
}

/// Nearest-neighbor upsample of an attention map to image size, written as a
/// grayscale PNG.
pub fn write_heat_map<F: Scalar>(
    map: &Array2<F>,
    out_h: usize,
    out_w: usize,
    path: &Path,
) -> Result<()> {
    let (mh, mw) = (map.shape()[0], map.shape()[1]);
    if mh == 0 || mw == 0 {
        return Err(Error::data("empty attention map"));
    }
    let mut img = image::GrayImage::new(out_w as u32, out_h as u32);
    for y in 0..out_h {
        let my = (y * mh / out_h).min(mh - 1);
        for x in 0..out_w {
            let mx = (x * mw / out_w).min(mw - 1);
            let v = map[[my, mx]].to_f64().unwrap();
            img.put_pixel(x as u32, y as u32, image::Luma([to_rgb_u8(v)]));
        }
    }
    img.save(path).map_err(|e| Error::format(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array1, Array3};

    #[test]
    fn overlay_writes_expected_files() {
        let tmp = tempfile::tempdir().unwrap();
        let sample = ReidSample::<f32> {
            pixels: Array3::from_elem((3, 16, 8), 0.5),
            identity: 3,
            camera: 1,
            mask: Some(Array2::zeros((16, 8))),
            occluder: None,
            path: None,
        };
        let embedding = ImageEmbedding::<f32> {
            part_features: ndarray::Array2::zeros((4, 8)),
            quality: Array1::from_vec(vec![0.9, 0.8, 0.2, 0.1]),
            global_parts: ndarray::Array2::zeros((4, 8)),
            attention: Some(Array2::from_elem((2, 1), 0.75)),
        };
        let files = write_quality_overlay(&sample, &embedding, tmp.path(), "img0").unwrap();
        assert_eq!(files.len(), 3);
        for f in files {
            assert!(f.exists(), "{f:?} missing");
        }
        let json = std::fs::read_to_string(tmp.path().join("img0_scores.json")).unwrap();
        assert!(json.contains("quality"));
        assert!(json.contains("occlusion_fraction"));
    }
}
