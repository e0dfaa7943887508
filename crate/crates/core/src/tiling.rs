//! Scene rasters, the tile grid, reflection-padded cropping and exact stitching.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Default tile side.
pub const DEFAULT_TILE_SIZE: usize = 352;

/// Row-major `height x width x channels` array.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster<T> {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<T>,
}

impl<T: Copy> Raster<T> {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::shape(format!(
                "{} values for a {height}x{width}x{channels} raster",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: T) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> T,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for r in 0..height {
            for c in 0..width {
                for ch in 0..channels {
                    data.push(f(r, c, ch));
                }
            }
        }
        Self {
            height,
            width,
            channels,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn pixel(&self, row: usize, col: usize) -> &[T] {
        let i = (row * self.width + col) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn get(&self, row: usize, col: usize, channel: usize) -> T {
        self.data[(row * self.width + col) * self.channels + channel]
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Raster<U> {
        Raster {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

impl Raster<f32> {
    /// `[channels, h, w]` tensor.
    pub fn to_chw(&self) -> Tensor {
        let (h, w, c) = (self.height, self.width, self.channels);
        let mut out = vec![0.0; h * w * c];
        for (i, px) in self.data.chunks_exact(c).enumerate() {
            for (ch, &v) in px.iter().enumerate() {
                out[ch * h * w + i] = v as f64;
            }
        }
        Tensor::new(&[c, h, w], out).expect("consistent shape")
    }

    pub fn from_chw(t: &Tensor) -> Result<Self> {
        if t.shape().len() != 3 {
            return Err(Error::shape(format!("expected [c, h, w], got {:?}", t.shape())));
        }
        let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
        let src = t.data();
        Ok(Self::from_fn(h, w, c, |r, col, ch| src[ch * h * w + r * w + col] as f32))
    }
}

/// RGB scene with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneImage {
    pub pixels: Raster<f32>,
    pub scene_id: String,
    pub source_path: String,
}

impl SceneImage {
    pub fn new(pixels: Raster<f32>, scene_id: impl Into<String>, source_path: impl Into<String>) -> Result<Self> {
        if pixels.channels() != 3 {
            return Err(Error::shape(format!("scene needs 3 channels, got {}", pixels.channels())));
        }
        if let Some(v) = pixels.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("scene pixel value {v} outside [0, 1]")));
        }
        Ok(Self {
            pixels,
            scene_id: scene_id.into(),
            source_path: source_path.into(),
        })
    }
}

/// Binary cloud labels, 1 = cloud.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMask {
    pub labels: Raster<u8>,
    pub scene_id: String,
}

impl LabelMask {
    pub fn new(labels: Raster<u8>, scene_id: impl Into<String>) -> Result<Self> {
        if labels.channels() != 1 {
            return Err(Error::shape(format!("label mask needs 1 channel, got {}", labels.channels())));
        }
        if let Some(v) = labels.data().iter().find(|&&v| v > 1) {
            return Err(Error::invalid(format!("label value {v} is not 0 or 1")));
        }
        Ok(Self {
            labels,
            scene_id: scene_id.into(),
        })
    }
}

/// Geometry of a row-major tiling; tiles past the scene edge are reflection padded.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileGrid {
    pub scene_height: usize,
    pub scene_width: usize,
    pub tile_size: usize,
    pub rows: usize,
    pub cols: usize,
    pub pad_bottom: usize,
    pub pad_right: usize,
}

impl TileGrid {
    pub fn tile_count(&self) -> usize {
        self.rows * self.cols
    }

    /// Top-left scene coordinate of tile `(row, col)`.
    pub fn origin(&self, row: usize, col: usize) -> (usize, usize) {
        (row * self.tile_size, col * self.tile_size)
    }

    /// `(tile_row, tile_col, offset_row, offset_col)` holding scene pixel `(y, x)`.
    pub fn locate(&self, y: usize, x: usize) -> (usize, usize, usize, usize) {
        let t = self.tile_size;
        (y / t, x / t, y % t, x % t)
    }

    /// Row-major index of tile `(row, col)`.
    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.cols + col
    }
}

pub fn plan_grid(scene_height: usize, scene_width: usize, tile_size: usize) -> Result<TileGrid> {
    if scene_height == 0 || scene_width == 0 || tile_size == 0 {
        return Err(Error::invalid(format!(
            "grid needs positive sizes, got scene {scene_height}x{scene_width} tile {tile_size}"
        )));
    }
    let rows = scene_height.div_ceil(tile_size);
    let cols = scene_width.div_ceil(tile_size);
    Ok(TileGrid {
        scene_height,
        scene_width,
        tile_size,
        rows,
        cols,
        pad_bottom: rows * tile_size - scene_height,
        pad_right: cols * tile_size - scene_width,
    })
}

/// Mirror index `i` into `0..n` without repeating the edge sample; periodic, so any
/// padding depth works.
fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let k = i % period;
    if k < n {
        k
    } else {
        period - k
    }
}

fn check_grid<T>(raster: &Raster<T>, grid: &TileGrid) -> Result<()> {
    if raster.height != grid.scene_height || raster.width != grid.scene_width {
        return Err(Error::shape(format!(
            "grid planned for {}x{} applied to a {}x{} scene",
            grid.scene_height, grid.scene_width, raster.height, raster.width
        )));
    }
    Ok(())
}

/// Cuts a raster into `rows * cols` tiles in row-major order.
pub fn crop<T: Copy>(raster: &Raster<T>, grid: &TileGrid) -> Result<Vec<Raster<T>>> {
    check_grid(raster, grid)?;
    let (t, c) = (grid.tile_size, raster.channels);
    let mut tiles = Vec::with_capacity(grid.tile_count());
    for row in 0..grid.rows {
        for col in 0..grid.cols {
            let (y0, x0) = grid.origin(row, col);
            let mut data = Vec::with_capacity(t * t * c);
            for dy in 0..t {
                let y = reflect(y0 + dy, raster.height);
                let line = &raster.data[y * raster.width * c..(y + 1) * raster.width * c];
                if x0 + t <= raster.width {
                    data.extend_from_slice(&line[x0 * c..(x0 + t) * c]);
                } else {
                    for dx in 0..t {
                        let x = reflect(x0 + dx, raster.width);
                        data.extend_from_slice(&line[x * c..(x + 1) * c]);
                    }
                }
            }
            tiles.push(Raster {
                height: t,
                width: t,
                channels: c,
                data,
            });
        }
    }
    Ok(tiles)
}

/// Reassembles row-major tiles and drops the padding.
pub fn stitch<T: Copy>(tiles: &[Raster<T>], grid: &TileGrid) -> Result<Raster<T>> {
    if tiles.len() != grid.tile_count() {
        return Err(Error::shape(format!(
            "grid has {} tiles, got {}",
            grid.tile_count(),
            tiles.len()
        )));
    }
    let t = grid.tile_size;
    let c = tiles[0].channels;
    if let Some(bad) = tiles
        .iter()
        .find(|r| r.height != t || r.width != t || r.channels != c)
    {
        return Err(Error::shape(format!(
            "tiles must all be {t}x{t}x{c}, found {}x{}x{}",
            bad.height, bad.width, bad.channels
        )));
    }
    let (h, w) = (grid.scene_height, grid.scene_width);
    let mut data = Vec::with_capacity(h * w * c);
    for y in 0..h {
        let (row, dy) = (y / t, y % t);
        for col in 0..grid.cols {
            let tile = &tiles[grid.index(row, col)];
            let x0 = col * t;
            let span = t.min(w - x0);
            let start = dy * t * c;
            data.extend_from_slice(&tile.data[start..start + span * c]);
        }
    }
    Ok(Raster {
        height: h,
        width: w,
        channels: c,
        data,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tile<T> {
    pub pixels: Raster<T>,
    pub grid_index: (usize, usize),
    pub scene_id: String,
}

pub fn crop_scene(scene: &SceneImage, grid: &TileGrid) -> Result<Vec<Tile<f32>>> {
    label_tiles(crop(&scene.pixels, grid)?, grid, &scene.scene_id)
}

pub fn crop_mask(mask: &LabelMask, grid: &TileGrid) -> Result<Vec<Tile<u8>>> {
    label_tiles(crop(&mask.labels, grid)?, grid, &mask.scene_id)
}

fn label_tiles<T>(rasters: Vec<Raster<T>>, grid: &TileGrid, scene_id: &str) -> Result<Vec<Tile<T>>> {
    Ok(rasters
        .into_iter()
        .enumerate()
        .map(|(i, pixels)| Tile {
            pixels,
            grid_index: (i / grid.cols, i % grid.cols),
            scene_id: scene_id.to_string(),
        })
        .collect())
}

/// Stitches per-tile maps (ordered by grid index) into a scene map.
pub fn stitch_tiles<T: Copy>(tiles: &[Tile<T>], grid: &TileGrid) -> Result<Raster<T>> {
    for (i, tile) in tiles.iter().enumerate() {
        if tile.grid_index != (i / grid.cols.max(1), i % grid.cols.max(1)) {
            return Err(Error::shape(format!(
                "tile {i} carries grid index {:?}; tiles must be row-major",
                tile.grid_index
            )));
        }
    }
    let rasters: Vec<Raster<T>> = tiles.iter().map(|t| t.pixels.clone()).collect();
    stitch(&rasters, grid)
}

/// One-hot `[2, h, w]` target: channel 0 background, channel 1 cloud.
pub fn encode_label(mask: &Raster<u8>) -> Result<Tensor> {
    if mask.channels != 1 {
        return Err(Error::shape(format!("label mask needs 1 channel, got {}", mask.channels)));
    }
    let n = mask.height * mask.width;
    let mut data = vec![0.0; 2 * n];
    for (i, &v) in mask.data.iter().enumerate() {
        match v {
            0 => data[i] = 1.0,
            1 => data[n + i] = 1.0,
            other => return Err(Error::invalid(format!("label value {other} is not 0 or 1"))),
        }
    }
    Tensor::new(&[2, mask.height, mask.width], data)
}
