//! Scene-level prediction: crop, run the network tile batch by tile batch, stitch.

use crate::decoder::ProbabilityMap;
use crate::error::{Error, Result};
use crate::metrics::{evaluate_scene, EvalReport, MetricConfig};
use crate::model::HrCloudNet;
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::tiling::{crop, plan_grid, stitch, LabelMask, Raster, SceneImage, TileGrid};

/// Per-tile probability maps in row-major grid order, evaluated in eval mode.
pub fn predict_tiles(
    net: &HrCloudNet,
    store: &ParamStore,
    pixels: &Raster<f32>,
    grid: &TileGrid,
    batch_size: usize,
) -> Result<Vec<ProbabilityMap>> {
    if batch_size == 0 {
        return Err(Error::invalid("batch_size must be at least 1"));
    }
    let tiles = crop(pixels, grid)?;
    let mut maps = Vec::with_capacity(tiles.len());
    for chunk in tiles.chunks(batch_size) {
        let x = Tensor::stack(&chunk.iter().map(Raster::to_chw).collect::<Vec<_>>())?;
        maps.extend(net.predict(store, &x)?);
    }
    Ok(maps)
}

/// Scene-sized cloud probability map and the grid that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct ScenePrediction {
    pub grid: TileGrid,
    pub tiles: Vec<ProbabilityMap>,
    /// Single-channel cloud probabilities at scene resolution.
    pub cloud: Raster<f64>,
}

impl ScenePrediction {
    /// `1` where the cloud probability is at least 0.5.
    pub fn binary_mask(&self) -> Raster<u8> {
        self.cloud.map(|p| u8::from(p >= crate::decoder::CLOUD_THRESHOLD))
    }
}

pub fn predict_scene(
    net: &HrCloudNet,
    store: &ParamStore,
    scene: &SceneImage,
    batch_size: usize,
) -> Result<ScenePrediction> {
    let grid = plan_grid(
        scene.pixels.height(),
        scene.pixels.width(),
        net.config().tile_size,
    )?;
    let tiles = predict_tiles(net, store, &scene.pixels, &grid, batch_size)?;
    let rasters = tiles
        .iter()
        .map(|m| Raster::new(m.height(), m.width(), 1, m.cloud().to_vec()))
        .collect::<Result<Vec<_>>>()?;
    let cloud = stitch(&rasters, &grid)?;
    Ok(ScenePrediction { grid, tiles, cloud })
}

/// Stitched-scene metrics over labelled scenes.
pub fn evaluate_scenes(
    net: &HrCloudNet,
    store: &ParamStore,
    scenes: &[(SceneImage, LabelMask)],
    batch_size: usize,
    config: &MetricConfig,
) -> Result<EvalReport> {
    let mut rows = Vec::with_capacity(scenes.len());
    for (image, mask) in scenes {
        let grid = plan_grid(image.pixels.height(), image.pixels.width(), net.config().tile_size)?;
        let tiles = predict_tiles(net, store, &image.pixels, &grid, batch_size)?;
        rows.push(evaluate_scene(&tiles, mask, &grid, config)?);
    }
    Ok(EvalReport::new(*config, rows))
}
