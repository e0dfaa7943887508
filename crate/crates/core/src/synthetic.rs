//! Seeded synthetic scenes: bright elliptical clouds over darker textured ground.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::io::{save_mask, save_scene, DatasetManifest, ManifestEntry, Split};
use crate::tiling::{LabelMask, Raster, SceneImage};

struct Ellipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
}

impl Ellipse {
    fn contains(&self, y: f64, x: f64) -> bool {
        let dy = (y - self.cy) / self.ry;
        let dx = (x - self.cx) / self.rx;
        dy * dy + dx * dx <= 1.0
    }
}

/// A scene and its mask. Cloud covers roughly a fifth to a half of the area.
pub fn synthetic_scene(height: usize, width: usize, seed: u64, scene_id: &str) -> Result<(SceneImage, LabelMask)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side = height.min(width) as f64;
    let blobs: Vec<Ellipse> = (0..rng.random_range(2..=4))
        .map(|_| Ellipse {
            cy: rng.random_range(0.0..height as f64),
            cx: rng.random_range(0.0..width as f64),
            ry: rng.random_range(0.12..0.3) * side,
            rx: rng.random_range(0.12..0.3) * side,
        })
        .collect();
    let ground: [f32; 3] = [rng.random_range(0.15..0.3), rng.random_range(0.2..0.35), rng.random_range(0.1..0.25)];
    let (fy, fx) = (rng.random_range(0.05..0.2), rng.random_range(0.05..0.2));
    let labels = Raster::from_fn(height, width, 1, |r, c, _| {
        u8::from(blobs.iter().any(|e| e.contains(r as f64, c as f64)))
    });
    let pixels = Raster::from_fn(height, width, 3, |r, c, ch| {
        let noise: f32 = rng.random_range(-0.04..0.04);
        let v = if labels.get(r, c, 0) == 1 {
            0.88 + noise
        } else {
            let texture = 0.08 * ((r as f64 * fy).sin() * (c as f64 * fx).cos()) as f32;
            ground[ch] + texture + noise
        };
        v.clamp(0.0, 1.0)
    });
    Ok((
        SceneImage::new(pixels, scene_id, "")?,
        LabelMask::new(labels, scene_id)?,
    ))
}

/// Writes `train + test` synthetic scenes as PNGs plus a `manifest.jsonl` under `dir`.
pub fn write_synthetic_dataset(
    dir: &Path,
    train: usize,
    test: usize,
    height: usize,
    width: usize,
    seed: u64,
) -> Result<DatasetManifest> {
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(train + test);
    for i in 0..train + test {
        let (split, id) = if i < train {
            (Split::Train, format!("train{i:03}"))
        } else {
            (Split::Test, format!("test{:03}", i - train))
        };
        let (scene, mask) = synthetic_scene(height, width, seed.wrapping_add(i as u64), &id)?;
        let image = dir.join(format!("{id}.png"));
        let mask_path = dir.join(format!("{id}_mask.png"));
        save_scene(&image, &scene.pixels)?;
        save_mask(&mask_path, &mask.labels)?;
        entries.push(ManifestEntry {
            scene_id: id,
            image,
            mask: mask_path,
            split,
            line: i + 1,
        });
    }
    let manifest = DatasetManifest {
        dataset: "manifest".into(),
        entries,
    };
    manifest.write(&dir.join("manifest.jsonl"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::load_manifest;

    #[test]
    fn seeded_and_mixed() {
        let (a, ma) = synthetic_scene(64, 64, 9, "a").unwrap();
        let (b, mb) = synthetic_scene(64, 64, 9, "a").unwrap();
        assert_eq!((a, ma.clone()), (b, mb));
        let frac = ma.labels.data().iter().filter(|&&v| v == 1).count() as f64 / 4096.0;
        assert!(frac > 0.0 && frac < 1.0, "cloud fraction {frac}");
    }

    #[test]
    fn dataset_round_trips_through_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let written = write_synthetic_dataset(dir.path(), 2, 1, 40, 48, 5).unwrap();
        let loaded = load_manifest(&dir.path().join("manifest.jsonl")).unwrap();
        assert_eq!(loaded.entries.len(), 3);
        assert_eq!(loaded.count(Split::Train), 2);
        let scenes = loaded.load_split(Split::Train).unwrap();
        let (direct, mask) = synthetic_scene(40, 48, 5, "train000").unwrap();
        assert_eq!(scenes[0].1.labels, mask.labels);
        for (x, y) in scenes[0].0.pixels.data().iter().zip(direct.pixels.data()) {
            assert!((x - y).abs() <= 0.5 / 255.0 + 1e-6);
        }
        assert_eq!(written.entries[2].scene_id, "test000");
    }
}
