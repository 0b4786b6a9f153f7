//! Dataset ingestion for standard ReID directory layouts.
//!
//! Images are expected under `train/`, `query/`, and `gallery/` (the
//! `bounding_box_train` / `bounding_box_test` aliases work too), named
//! `personID_cameraID_*.ext` as in the common benchmark releases. Occlusion
//! masks, when present, are sibling files named `<stem>.mask.png` with white
//! marking occluded pixels. Pixels are kept raw in `[0, 1]`; normalization to
//! the model's declared mean/std happens when batches are assembled.

use std::path::{Path, PathBuf};

use image::GenericImageView;
use ndarray::{Array2, Array3};

use crate::error::{Error, Result};
use crate::{sc, Scalar};

/// What painted over the pedestrian, for synthetic data diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OccluderKind {
    Object,
    Pedestrian,
}

/// One image with its labels and optional ground-truth occlusion mask.
#[derive(Debug, Clone)]
pub struct ReidSample<F: Scalar> {
    /// Raw RGB pixels in `[0, 1]`, shape `(3, H, W)`.
    pub pixels: Array3<F>,
    /// Person identity; `-1` marks junk/distractor images.
    pub identity: i64,
    pub camera: u32,
    /// `1` where an occluder covers the pixel.
    pub mask: Option<Array2<u8>>,
    pub occluder: Option<OccluderKind>,
    pub path: Option<PathBuf>,
}

/// The three standard splits.
#[derive(Debug)]
pub struct SampleSets<F: Scalar> {
    pub train: Vec<ReidSample<F>>,
    pub query: Vec<ReidSample<F>>,
    pub gallery: Vec<ReidSample<F>>,
    /// Files skipped because the name or content could not be parsed.
    pub skipped: usize,
}

impl<F: Scalar> Default for SampleSets<F> {
    fn default() -> Self {
        SampleSets {
            train: Vec::new(),
            query: Vec::new(),
            gallery: Vec::new(),
            skipped: 0,
        }
    }
}

/// Loader options.
#[derive(Debug, Clone, Copy)]
pub struct LoadOptions {
    /// Keep identity `-1` distractor files instead of skipping them.
    pub keep_junk: bool,
    pub require_train: bool,
    pub require_eval: bool,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions {
            keep_junk: false,
            require_train: false,
            require_eval: true,
        }
    }
}

/// Target geometry for loaded images.
#[derive(Debug, Clone, Copy)]
pub struct PixelSpec {
    pub height: usize,
    pub width: usize,
}

/// Parse `personID_cameraID_*` names like `0042_c3_000001` or the
/// `0042_c3s1_000001` variant. Returns `(identity, camera)`.
pub fn parse_reid_filename(stem: &str) -> Option<(i64, u32)> {
    let mut parts = stem.splitn(3, '_');
    let id_part = parts.next()?;
    let cam_part = parts.next()?;
    let identity: i64 = id_part.parse().ok()?;
    let rest = cam_part.strip_prefix('c')?;
    let digits: String = rest.chars().take_while(|c| c.is_ascii_digit()).collect();
    if digits.is_empty() {
        return None;
    }
    let camera: u32 = digits.parse().ok()?;
    Some((identity, camera))
}

/// Convert a decoded image to a `(3, H, W)` array in `[0, 1]`, resizing if
/// the source geometry differs.
fn image_to_array<F: Scalar>(img: &image::DynamicImage, spec: &PixelSpec) -> Array3<F> {
    let resized = if img.dimensions() == (spec.width as u32, spec.height as u32) {
        img.to_rgb8()
    } else {
        image::imageops::resize(
            &img.to_rgb8(),
            spec.width as u32,
            spec.height as u32,
            image::imageops::FilterType::Triangle,
        )
    };
    let mut out = Array3::<F>::zeros((3, spec.height, spec.width));
    for (x, y, p) in resized.enumerate_pixels() {
        for c in 0..3 {
            out[[c, y as usize, x as usize]] = sc::<F>(p.0[c] as f64 / 255.0);
        }
    }
    out
}

fn load_mask(path: &Path, spec: &PixelSpec) -> Option<Array2<u8>> {
    let img = image::open(path).ok()?;
    let gray = image::imageops::resize(
        &img.to_luma8(),
        spec.width as u32,
        spec.height as u32,
        image::imageops::FilterType::Nearest,
    );
    let mut mask = Array2::<u8>::zeros((spec.height, spec.width));
    for (x, y, p) in gray.enumerate_pixels() {
        mask[[y as usize, x as usize]] = u8::from(p.0[0] > 127);
    }
    Some(mask)
}

const IMAGE_EXTENSIONS: [&str; 4] = ["png", "jpg", "jpeg", "bmp"];

fn load_split<F: Scalar>(
    dir: &Path,
    spec: &PixelSpec,
    opts: &LoadOptions,
    skipped: &mut usize,
) -> Result<Vec<ReidSample<F>>> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    entries.sort();
    let mut out = Vec::new();
    for path in entries {
        let Some(ext) = path.extension().and_then(|e| e.to_str()) else {
            continue;
        };
        if !IMAGE_EXTENSIONS.contains(&ext.to_ascii_lowercase().as_str()) {
            continue;
        }
        let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else {
            continue;
        };
        if stem.ends_with(".mask") {
            continue; // sibling mask, attached to its image below
        }
        let Some((identity, camera)) = parse_reid_filename(stem) else {
            eprintln!("warning: cannot parse ReID filename {:?}, skipping", path);
            *skipped += 1;
            continue;
        };
        if identity < 0 && !opts.keep_junk {
            continue;
        }
        let img = match image::open(&path) {
            Ok(img) => img,
            Err(e) => {
                eprintln!("warning: cannot decode {:?}: {e}, skipping", path);
                *skipped += 1;
                continue;
            }
        };
        let pixels = image_to_array::<F>(&img, spec);
        let mask_path = path.with_file_name(format!("{stem}.mask.png"));
        let mask = if mask_path.exists() {
            load_mask(&mask_path, spec)
        } else {
            None
        };
        out.push(ReidSample {
            pixels,
            identity,
            camera,
            mask,
            occluder: None,
            path: Some(path),
        });
    }
    Ok(out)
}

fn find_split(root: &Path, names: &[&str]) -> Option<PathBuf> {
    names.iter().map(|n| root.join(n)).find(|p| p.is_dir())
}

/// Load `{train, query, gallery}` splits from a dataset root.
pub fn load_reid_dir<F: Scalar>(
    root: &Path,
    spec: &PixelSpec,
    opts: &LoadOptions,
) -> Result<SampleSets<F>> {
    if !root.is_dir() {
        return Err(Error::data(format!("dataset root {:?} is not a directory", root)));
    }
    let mut sets = SampleSets::default();
    let mut skipped = 0usize;
    if let Some(dir) = find_split(root, &["train", "bounding_box_train"]) {
        sets.train = load_split(&dir, spec, opts, &mut skipped)?;
    }
    if let Some(dir) = find_split(root, &["query"]) {
        sets.query = load_split(&dir, spec, opts, &mut skipped)?;
    }
    if let Some(dir) = find_split(root, &["gallery", "bounding_box_test"]) {
        sets.gallery = load_split(&dir, spec, opts, &mut skipped)?;
    }
    sets.skipped = skipped;
    if skipped > 0 {
        eprintln!("warning: skipped {skipped} unreadable files under {:?}", root);
    }
    if opts.require_train && sets.train.is_empty() {
        return Err(Error::data(format!("no training images found under {:?}", root)));
    }
    if opts.require_eval && (sets.query.is_empty() || sets.gallery.is_empty()) {
        return Err(Error::data(format!(
            "query/gallery split missing or empty under {:?}",
            root
        )));
    }
    Ok(sets)
}

/// Normalize raw `[0, 1]` pixels to the model's declared per-channel
/// mean/std.
pub fn normalize_image<F: Scalar>(pixels: &Array3<F>, mean: &[f64; 3], std: &[f64; 3]) -> Array3<F> {
    let mut out = pixels.clone();
    for c in 0..3 {
        let m = sc::<F>(mean[c]);
        let s = sc::<F>(std[c]);
        out.index_axis_mut(ndarray::Axis(0), c)
            .mapv_inplace(|v| (v - m) / s);
    }
    out
}

/// Write one sample (and its mask, when present) to `dir` in the standard
/// naming convention. Used by the synthetic-data command.
pub fn write_sample_png<F: Scalar>(sample: &ReidSample<F>, dir: &Path, sequence: usize) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let (h, w) = (sample.pixels.shape()[1], sample.pixels.shape()[2]);
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [0, 1, 2].map(|c| {
                let v = sample.pixels[[c, y, x]].to_f64().unwrap();
                (v.clamp(0.0, 1.0) * 255.0).round() as u8
            });
            img.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    let stem = format!("{:04}_c{}_{:06}", sample.identity, sample.camera, sequence);
    let path = dir.join(format!("{stem}.png"));
    img.save(&path).map_err(|e| Error::format(e.to_string()))?;
    if let Some(mask) = &sample.mask {
        let mut m = image::GrayImage::new(w as u32, h as u32);
        for y in 0..h {
            for x in 0..w {
                m.put_pixel(x as u32, y as u32, image::Luma([mask[[y, x]] * 255]));
            }
        }
        m.save(dir.join(format!("{stem}.mask.png")))
            .map_err(|e| Error::format(e.to_string()))?;
    }
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_traits::ToPrimitive;

    #[test]
    fn filename_grammar() {
        assert_eq!(parse_reid_filename("0042_c3_000001"), Some((42, 3)));
        assert_eq!(parse_reid_filename("0001_c1s1_042893"), Some((1, 1)));
        assert_eq!(parse_reid_filename("-1_c6_017727"), Some((-1, 6)));
        assert_eq!(parse_reid_filename("readme"), None);
        assert_eq!(parse_reid_filename("12_x3_0"), None);
    }

    #[test]
    fn fixture_directory_round_trip() {
        let tmp = tempfile::tempdir().unwrap();
        let root = tmp.path();
        let spec = PixelSpec { height: 16, width: 8 };
        // ten files across splits with known labels
        let mk = |dir: &str, id: i64, cam: u32, seq: usize| {
            let sample = ReidSample::<f32> {
                pixels: Array3::from_elem((3, 16, 8), 0.5),
                identity: id,
                camera: cam,
                mask: None,
                occluder: None,
                path: None,
            };
            write_sample_png(&sample, &root.join(dir), seq).unwrap();
        };
        let expected_train = vec![(1i64, 1u32), (1, 2), (2, 1), (2, 3)];
        for (i, &(id, cam)) in expected_train.iter().enumerate() {
            mk("train", id, cam, i);
        }
        for (i, &(id, cam)) in [(1i64, 1u32), (2, 2)].iter().enumerate() {
            mk("query", id, cam, 10 + i);
        }
        for (i, &(id, cam)) in [(1i64, 2u32), (1, 3), (2, 1), (2, 2)].iter().enumerate() {
            mk("gallery", id, cam, 20 + i);
        }
        let sets = load_reid_dir::<f32>(root, &spec, &LoadOptions::default()).unwrap();
        let got: Vec<(i64, u32)> = sets.train.iter().map(|s| (s.identity, s.camera)).collect();
        assert_eq!(got, expected_train);
        assert_eq!(sets.query.len(), 2);
        assert_eq!(sets.gallery.len(), 4);
        assert_eq!(sets.skipped, 0);
    }

    #[test]
    fn junk_ids_are_skipped_by_default() {
        let tmp = tempfile::tempdir().unwrap();
        let root = tmp.path();
        let spec = PixelSpec { height: 8, width: 8 };
        let junk = ReidSample::<f32> {
            pixels: Array3::zeros((3, 8, 8)),
            identity: -1,
            camera: 1,
            mask: None,
            occluder: None,
            path: None,
        };
        write_sample_png(&junk, &root.join("query"), 0).unwrap();
        let real = ReidSample::<f32> {
            pixels: Array3::zeros((3, 8, 8)),
            identity: 3,
            camera: 1,
            mask: None,
            occluder: None,
            path: None,
        };
        write_sample_png(&real, &root.join("query"), 1).unwrap();
        write_sample_png(&real, &root.join("gallery"), 2).unwrap();

        let sets = load_reid_dir::<f32>(root, &spec, &LoadOptions::default()).unwrap();
        assert_eq!(sets.query.len(), 1);
        let opts = LoadOptions {
            keep_junk: true,
            ..LoadOptions::default()
        };
        let sets = load_reid_dir::<f32>(root, &spec, &opts).unwrap();
        assert_eq!(sets.query.len(), 2);
    }

    #[test]
    fn missing_required_split_is_an_error() {
        let tmp = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(tmp.path().join("query")).unwrap();
        let spec = PixelSpec { height: 8, width: 8 };
        let err = load_reid_dir::<f32>(tmp.path(), &spec, &LoadOptions::default());
        assert!(err.is_err(), "empty required split must error");
    }

    #[test]
    fn mask_siblings_attach_and_do_not_become_samples() {
        let tmp = tempfile::tempdir().unwrap();
        let root = tmp.path();
        let spec = PixelSpec { height: 8, width: 8 };
        let mut mask = Array2::<u8>::zeros((8, 8));
        mask[[7, 0]] = 1;
        let s = ReidSample::<f32> {
            pixels: Array3::from_elem((3, 8, 8), 0.2),
            identity: 5,
            camera: 2,
            mask: Some(mask.clone()),
            occluder: None,
            path: None,
        };
        write_sample_png(&s, &root.join("query"), 0).unwrap();
        write_sample_png(&s, &root.join("gallery"), 1).unwrap();
        let sets = load_reid_dir::<f32>(root, &spec, &LoadOptions::default()).unwrap();
        assert_eq!(sets.query.len(), 1);
        assert_eq!(sets.query[0].mask.as_ref().unwrap()[[7, 0]], 1);
        assert_eq!(sets.query[0].mask.as_ref().unwrap()[[0, 0]], 0);
    }

    #[test]
    fn normalization_applies_declared_moments() {
        let img = Array3::<f64>::from_elem((3, 2, 2), 0.75);
        let out = normalize_image(&img, &[0.5; 3], &[0.5; 3]);
        for v in out.iter() {
            assert!((v.to_f64().unwrap() - 0.5).abs() < 1e-12);
        }
    }
}
