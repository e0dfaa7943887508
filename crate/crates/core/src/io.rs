//! Image files, the dataset manifest and the confusion overlay.
//!
//! Scenes are 8-bit RGB scaled by 1/255. Masks are single-channel 8-bit, cloud where the
//! value is at least 128. Probability maps are written as `round(255 p)` grayscale.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tiling::{LabelMask, Raster, SceneImage};

pub fn load_scene(path: &Path, scene_id: &str) -> Result<SceneImage> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
    SceneImage::new(
        Raster::new(h as usize, w as usize, 3, data)?,
        scene_id,
        path.display().to_string(),
    )
}

pub fn load_mask(path: &Path, scene_id: &str) -> Result<LabelMask> {
    let img = image::open(path)?.to_luma8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| u8::from(v >= 128)).collect();
    LabelMask::new(Raster::new(h as usize, w as usize, 1, data)?, scene_id)
}

fn dims(r: &Raster<impl Copy>) -> (u32, u32) {
    (r.width() as u32, r.height() as u32)
}

pub fn save_scene(path: &Path, pixels: &Raster<f32>) -> Result<()> {
    if pixels.channels() != 3 {
        return Err(Error::shape(format!("RGB output needs 3 channels, got {}", pixels.channels())));
    }
    let (w, h) = dims(pixels);
    let raw = pixels.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    RgbImage::from_raw(w, h, raw).expect("sized buffer").save(path)?;
    Ok(())
}

/// Binary mask as 0/255.
pub fn save_mask(path: &Path, mask: &Raster<u8>) -> Result<()> {
    let (w, h) = dims(mask);
    let raw = mask.data().iter().map(|&v| if v != 0 { 255 } else { 0 }).collect();
    GrayImage::from_raw(w, h, raw).expect("sized buffer").save(path)?;
    Ok(())
}

pub fn probability_to_u8(p: f64) -> u8 {
    (p.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn save_probability(path: &Path, cloud: &Raster<f64>) -> Result<()> {
    let (w, h) = dims(cloud);
    let raw = cloud.data().iter().map(|&p| probability_to_u8(p)).collect();
    GrayImage::from_raw(w, h, raw).expect("sized buffer").save(path)?;
    Ok(())
}

/// Reads an 8-bit grayscale probability image back to `[0, 1]`.
pub fn load_probability(path: &Path) -> Result<Raster<f64>> {
    let img = image::open(path)?.to_luma8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| v as f64 / 255.0).collect();
    Raster::new(h as usize, w as usize, 1, data)
}

/// Overlay palette: true positive white, true negative black, false positive red,
/// false negative blue.
pub const PALETTE_TP: [u8; 3] = [255, 255, 255];
pub const PALETTE_TN: [u8; 3] = [0, 0, 0];
pub const PALETTE_FP: [u8; 3] = [255, 0, 0];
pub const PALETTE_FN: [u8; 3] = [0, 0, 255];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    pub fn_: usize,
}

/// Colour overlay of a binary prediction against a binary label, plus the counts.
pub fn confusion_overlay(pred: &Raster<u8>, label: &Raster<u8>) -> Result<(Raster<u8>, Confusion)> {
    if (pred.height(), pred.width()) != (label.height(), label.width()) || pred.channels() != 1 || label.channels() != 1
    {
        return Err(Error::shape(format!(
            "prediction {}x{}x{} and label {}x{}x{} must be equal single-channel shapes",
            pred.height(),
            pred.width(),
            pred.channels(),
            label.height(),
            label.width(),
            label.channels()
        )));
    }
    if let Some(v) = pred.data().iter().chain(label.data()).find(|&&v| v > 1) {
        return Err(Error::invalid(format!("overlay inputs must be binary, found {v}")));
    }
    let mut counts = Confusion::default();
    let mut data = Vec::with_capacity(pred.data().len() * 3);
    for (&p, &t) in pred.data().iter().zip(label.data()) {
        let colour = match (p, t) {
            (1, 1) => {
                counts.tp += 1;
                PALETTE_TP
            }
            (0, 0) => {
                counts.tn += 1;
                PALETTE_TN
            }
            (1, 0) => {
                counts.fp += 1;
                PALETTE_FP
            }
            _ => {
                counts.fn_ += 1;
                PALETTE_FN
            }
        };
        data.extend_from_slice(&colour);
    }
    Ok((Raster::new(pred.height(), pred.width(), 3, data)?, counts))
}

pub fn save_rgb8(path: &Path, rgb: &Raster<u8>) -> Result<()> {
    let (w, h) = dims(rgb);
    RgbImage::from_raw(w, h, rgb.data().to_vec())
        .ok_or_else(|| Error::shape("RGB output needs 3 channels"))?
        .save(path)?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestRecord {
    image: PathBuf,
    mask: PathBuf,
    split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    id: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub scene_id: String,
    pub image: PathBuf,
    pub mask: PathBuf,
    pub split: Split,
    /// 1-based manifest line.
    pub line: usize,
}

/// One JSON object per line: `{"image": .., "mask": .., "split": "train"|"test", "id": ..}`.
/// `id` defaults to the image file stem. Relative paths resolve against the manifest's
/// directory. Blank lines and lines starting with `#` are skipped. All dangling paths are
/// reported together.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    /// Manifest file stem.
    pub dataset: String,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.split(split).count()
    }

    /// Loads every scene of a split with its mask, checking the shapes agree.
    pub fn load_split(&self, split: Split) -> Result<Vec<(SceneImage, LabelMask)>> {
        self.split(split)
            .map(|e| {
                let image = load_scene(&e.image, &e.scene_id)?;
                let mask = load_mask(&e.mask, &e.scene_id)?;
                let (ih, iw) = (image.pixels.height(), image.pixels.width());
                let (mh, mw) = (mask.labels.height(), mask.labels.width());
                if (ih, iw) != (mh, mw) {
                    return Err(Error::shape(format!(
                        "scene {} is {ih}x{iw} but its mask is {mh}x{mw}",
                        e.scene_id
                    )));
                }
                Ok((image, mask))
            })
            .collect()
    }

    /// Writes the manifest with paths relative to `path`'s directory where possible.
    pub fn write(&self, path: &Path) -> Result<()> {
        let base = path.parent().unwrap_or(Path::new(""));
        let rel = |p: &Path| p.strip_prefix(base).map(Path::to_path_buf).unwrap_or_else(|_| p.to_path_buf());
        let mut out = String::new();
        for e in &self.entries {
            let rec = ManifestRecord {
                image: rel(&e.image),
                mask: rel(&e.mask),
                split: e.split,
                id: Some(e.scene_id.clone()),
            };
            out += &serde_json::to_string(&rec).expect("plain record");
            out.push('\n');
        }
        fs::write(path, out)?;
        Ok(())
    }
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path)?;
    let base = path.parent().unwrap_or(Path::new(""));
    let mut entries: Vec<ManifestEntry> = Vec::new();
    let mut seen = BTreeSet::new();
    let mut missing = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let format_err = |message: String| Error::Format {
            path: path.to_path_buf(),
            line,
            message,
        };
        let rec: ManifestRecord = serde_json::from_str(trimmed).map_err(|e| format_err(e.to_string()))?;
        let image = base.join(&rec.image);
        let mask = base.join(&rec.mask);
        for p in [&image, &mask] {
            if !p.is_file() {
                missing.push((p.clone(), line));
            }
        }
        let scene_id = match rec.id {
            Some(id) => id,
            None => rec
                .image
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .ok_or_else(|| format_err("image path has no file name".into()))?,
        };
        if !seen.insert(scene_id.clone()) {
            return Err(format_err(format!("duplicate scene id {scene_id}")));
        }
        entries.push(ManifestEntry {
            scene_id,
            image,
            mask,
            split: rec.split,
            line,
        });
    }
    if !missing.is_empty() {
        return Err(Error::MissingFiles(missing));
    }
    if entries.is_empty() {
        log::warn!("manifest {} lists no scenes", path.display());
    }
    Ok(DatasetManifest {
        dataset: path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
        entries,
    })
}
