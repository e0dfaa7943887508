//! Evaluation measures on continuous cloud-probability maps: mean absolute error,
//! weighted F-beta and the structure measure, plus per-scene and dataset reports.
//!
//! Maps are row-major slices; predictions are probabilities in `[0, 1]`, ground truths
//! are `{0, 1}` labels.

use serde::{Deserialize, Serialize};

use crate::decoder::ProbabilityMap;
use crate::error::{Error, Result};
use crate::tiling::{stitch, LabelMask, Raster, TileGrid};

/// MATLAB's `eps`, used by the reference formulas as a guard term.
pub const EPS: f64 = f64::EPSILON;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricConfig {
    /// Precision/recall balance of the weighted F measure.
    pub beta2: f64,
    /// Standard deviation of the error-diffusion kernel.
    pub sigma: f64,
    /// Side of the (odd) error-diffusion window.
    pub window: usize,
    /// Distance at which the background error weight reaches 1.5.
    pub decay: f64,
    /// Object versus region balance of the structure measure.
    pub alpha: f64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            beta2: 1.0,
            sigma: 5.0,
            window: 7,
            decay: 5.0,
            alpha: 0.5,
        }
    }
}

impl MetricConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("metrics.beta2", self.beta2), ("metrics.sigma", self.sigma), ("metrics.decay", self.decay)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.window % 2 == 0 {
            return Err(Error::config(format!("metrics.window must be odd, got {}", self.window)));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::config(format!("metrics.alpha must lie in [0, 1], got {}", self.alpha)));
        }
        Ok(())
    }
}

fn check_pair(y: &[f64], t: &[u8], h: usize, w: usize) -> Result<()> {
    if y.len() != h * w || t.len() != h * w {
        return Err(Error::shape(format!(
            "prediction ({}) and ground truth ({}) must both hold {h}x{w} values",
            y.len(),
            t.len()
        )));
    }
    if let Some(v) = t.iter().find(|&&v| v > 1) {
        return Err(Error::invalid(format!("ground truth value {v} is not 0 or 1")));
    }
    Ok(())
}

pub fn mean_absolute_error(y: &[f64], t: &[u8]) -> Result<f64> {
    if y.len() != t.len() || y.is_empty() {
        return Err(Error::shape(format!(
            "prediction has {} values, ground truth {}",
            y.len(),
            t.len()
        )));
    }
    Ok(y.iter().zip(t).map(|(&p, &l)| (p - l as f64).abs()).sum::<f64>() / y.len() as f64)
}

/// Exact Euclidean distance to the nearest foreground pixel and that pixel's index.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceTransform {
    pub distance: Vec<f64>,
    pub nearest: Vec<usize>,
}

/// Rational `num / den` with `den >= 0`; `den == 0` encodes +/- infinity by the sign of `num`.
#[derive(Clone, Copy)]
struct Frac {
    num: i128,
    den: i128,
}

impl Frac {
    const NEG_INF: Frac = Frac { num: -1, den: 0 };
    const POS_INF: Frac = Frac { num: 1, den: 0 };

    fn le(self, other: Frac) -> bool {
        match (self.den, other.den) {
            (0, 0) => self.num <= other.num,
            (0, _) => self.num < 0,
            (_, 0) => other.num > 0,
            _ => self.num * other.den <= other.num * self.den,
        }
    }

    /// `self < x` for integer `x`.
    fn lt_int(self, x: i128) -> bool {
        if self.den == 0 {
            self.num < 0
        } else {
            self.num < x * self.den
        }
    }
}

/// Exact two-pass distance transform (lower envelope of parabolas).
///
/// Among equidistant foreground pixels the one with the smallest column wins, then
/// the smallest row. Returns `None` when there is no foreground.
pub fn distance_transform(fg: &[bool], h: usize, w: usize) -> Option<DistanceTransform> {
    assert_eq!(fg.len(), h * w);
    if !fg.iter().any(|&f| f) {
        return None;
    }
    const NONE: i64 = -1;
    // Pass 1: nearest foreground row within each column.
    let mut g = vec![i64::MAX; h * w];
    let mut row_of = vec![NONE; h * w];
    let mut up = vec![NONE; h];
    for x in 0..w {
        let mut last = NONE;
        for y in 0..h {
            if fg[y * w + x] {
                last = y as i64;
            }
            up[y] = last;
        }
        let mut next = NONE;
        for y in (0..h).rev() {
            if fg[y * w + x] {
                next = y as i64;
            }
            let yi = y as i64;
            let du = (up[y] != NONE).then(|| yi - up[y]);
            let dd = (next != NONE).then(|| next - yi);
            let pick = match (du, dd) {
                (Some(a), Some(b)) if a <= b => Some((a, up[y])),
                (Some(_), Some(b)) => Some((b, next)),
                (Some(a), None) => Some((a, up[y])),
                (None, Some(b)) => Some((b, next)),
                (None, None) => None,
            };
            if let Some((d, r)) = pick {
                g[y * w + x] = d * d;
                row_of[y * w + x] = r;
            }
        }
    }
    // Pass 2: lower envelope along each row.
    let mut distance = vec![0.0; h * w];
    let mut nearest = vec![0; h * w];
    let mut v: Vec<usize> = Vec::with_capacity(w);
    let mut z: Vec<Frac> = Vec::with_capacity(w + 1);
    for y in 0..h {
        let f = |x: usize| g[y * w + x] as i128;
        v.clear();
        z.clear();
        for q in (0..w).filter(|&q| g[y * w + q] != i64::MAX) {
            if v.is_empty() {
                v.push(q);
                z.push(Frac::NEG_INF);
                z.push(Frac::POS_INF);
                continue;
            }
            let qi = q as i128;
            let s = loop {
                let p = *v.last().expect("non-empty envelope");
                let pi = p as i128;
                let s = Frac {
                    num: (f(q) + qi * qi) - (f(p) + pi * pi),
                    den: 2 * (qi - pi),
                };
                let k = v.len() - 1;
                if k > 0 && s.le(z[k]) {
                    v.pop();
                    z.pop();
                } else {
                    break s;
                }
            };
            let k = v.len();
            z[k] = s;
            v.push(q);
            z.push(Frac::POS_INF);
        }
        // Any column holding foreground is finite in every row.
        debug_assert!(!v.is_empty());
        let mut k = 0;
        for x in 0..w {
            while z[k + 1].lt_int(x as i128) {
                k += 1;
            }
            let c = v[k];
            let dx = x as i64 - c as i64;
            let d2 = dx * dx + g[y * w + c];
            distance[y * w + x] = (d2 as f64).sqrt();
            nearest[y * w + x] = row_of[y * w + c] as usize * w + c;
        }
    }
    Some(DistanceTransform { distance, nearest })
}

/// Normalised isotropic Gaussian taps of length `window`.
fn gaussian_taps(window: usize, sigma: f64) -> Vec<f64> {
    let r = (window / 2) as isize;
    let taps: Vec<f64> = (-r..=r)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / s).collect()
}

/// Same-size correlation with a separable kernel and zero padding.
fn filter_zero_padded(src: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let r = (taps.len() / 2) as isize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, &t) in taps.iter().enumerate() {
                let xx = x as isize + k as isize - r;
                if xx >= 0 && (xx as usize) < w {
                    acc += t * src[y * w + xx as usize];
                }
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, &t) in taps.iter().enumerate() {
                let yy = y as isize + k as isize - r;
                if yy >= 0 && (yy as usize) < h {
                    acc += t * tmp[yy as usize * w + x];
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Weighted F-beta of a probability map against a binary ground truth.
pub fn weighted_fbeta(y: &[f64], t: &[u8], h: usize, w: usize, config: &MetricConfig) -> Result<f64> {
    check_pair(y, t, h, w)?;
    let fg: Vec<bool> = t.iter().map(|&v| v == 1).collect();
    let Some(dt) = distance_transform(&fg, h, w) else {
        return Err(Error::UndefinedMeasure(
            "weighted F-beta needs at least one foreground pixel".into(),
        ));
    };
    let e: Vec<f64> = y.iter().zip(t).map(|(&p, &l)| (p - l as f64).abs()).collect();
    // Background pixels inherit the error of their nearest foreground pixel.
    let et: Vec<f64> = (0..h * w)
        .map(|i| if fg[i] { e[i] } else { e[dt.nearest[i]] })
        .collect();
    let ea = filter_zero_padded(&et, h, w, &gaussian_taps(config.window, config.sigma));
    let rate = 0.5f64.ln() / config.decay;
    let mut fg_count = 0.0;
    let mut fg_err = 0.0;
    let mut bg_err = 0.0;
    for i in 0..h * w {
        if fg[i] {
            fg_count += 1.0;
            fg_err += if ea[i] < e[i] { ea[i] } else { e[i] };
        } else {
            bg_err += e[i] * (2.0 - (rate * dt.distance[i]).exp());
        }
    }
    let tp = fg_count - fg_err;
    let recall = 1.0 - fg_err / fg_count;
    let precision = tp / (EPS + tp + bg_err);
    Ok((1.0 + config.beta2) * recall * precision / (EPS + recall + config.beta2 * precision))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample standard deviation; zero for fewer than two values.
fn std_dev(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

fn object_score(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let x = mean(values);
    2.0 * x / (x * x + 1.0 + std_dev(values) + EPS)
}

fn object_term(y: &[f64], t: &[u8]) -> f64 {
    let fg: Vec<f64> = y.iter().zip(t).filter(|(_, &l)| l == 1).map(|(&p, _)| p).collect();
    let bg: Vec<f64> = y.iter().zip(t).filter(|(_, &l)| l == 0).map(|(&p, _)| 1.0 - p).collect();
    let u = fg.len() as f64 / y.len() as f64;
    u * object_score(&fg) + (1.0 - u) * object_score(&bg)
}

/// Structural similarity of one block; empty blocks score 0.
fn block_ssim(x: &[f64], g: &[f64]) -> f64 {
    let n = x.len() as f64;
    if x.is_empty() {
        return 0.0;
    }
    let mx = mean(x);
    let my = mean(g);
    let denom = n - 1.0 + EPS;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for (&a, &b) in x.iter().zip(g) {
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
        sxy += (a - mx) * (b - my);
    }
    let (sxx, syy, sxy) = (sxx / denom, syy / denom, sxy / denom);
    let a = 4.0 * mx * my * sxy;
    let b = (mx * mx + my * my) * (sxx + syy);
    if a != 0.0 {
        a / (b + EPS)
    } else if b == 0.0 {
        1.0
    } else {
        0.0
    }
}

/// 1-based rounded foreground centroid `(col, row)`.
fn centroid(t: &[u8], h: usize, w: usize) -> (usize, usize) {
    let total: f64 = t.iter().map(|&v| v as f64).sum();
    if total == 0.0 {
        return ((w as f64 / 2.0).round() as usize, (h as f64 / 2.0).round() as usize);
    }
    let mut sx = 0.0;
    let mut sy = 0.0;
    for r in 0..h {
        for c in 0..w {
            let v = t[r * w + c] as f64;
            sx += v * (c + 1) as f64;
            sy += v * (r + 1) as f64;
        }
    }
    ((sx / total).round() as usize, (sy / total).round() as usize)
}

fn region_term(y: &[f64], t: &[u8], h: usize, w: usize) -> f64 {
    let (cx, cy) = centroid(t, h, w);
    let area = (h * w) as f64;
    let block = |r0: usize, r1: usize, c0: usize, c1: usize| {
        let mut ys = Vec::with_capacity((r1 - r0) * (c1 - c0));
        let mut gs = Vec::with_capacity(ys.capacity());
        for r in r0..r1 {
            for c in c0..c1 {
                ys.push(y[r * w + c]);
                gs.push(t[r * w + c] as f64);
            }
        }
        block_ssim(&ys, &gs)
    };
    let w1 = (cx * cy) as f64 / area;
    let w2 = ((w - cx) * cy) as f64 / area;
    let w3 = (cx * (h - cy)) as f64 / area;
    let w4 = 1.0 - w1 - w2 - w3;
    w1 * block(0, cy, 0, cx) + w2 * block(0, cy, cx, w) + w3 * block(cy, h, 0, cx) + w4 * block(cy, h, cx, w)
}

/// Structure measure `alpha * S_object + (1 - alpha) * S_region`, clamped at 0.
pub fn structure_measure(y: &[f64], t: &[u8], h: usize, w: usize, alpha: f64) -> Result<f64> {
    check_pair(y, t, h, w)?;
    let fg_ratio = t.iter().map(|&v| v as f64).sum::<f64>() / (h * w) as f64;
    if fg_ratio == 0.0 {
        return Ok(1.0 - mean(y));
    }
    if fg_ratio == 1.0 {
        return Ok(mean(y));
    }
    let q = alpha * object_term(y, t) + (1.0 - alpha) * region_term(y, t, h, w);
    Ok(q.max(0.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneMetrics {
    pub scene_id: String,
    pub mae: f64,
    /// `None` when the ground truth has no cloud pixel.
    pub fbeta: Option<f64>,
    pub s_measure: f64,
}

pub fn evaluate_map(
    scene_id: &str,
    y: &[f64],
    t: &[u8],
    h: usize,
    w: usize,
    config: &MetricConfig,
) -> Result<SceneMetrics> {
    check_pair(y, t, h, w)?;
    let fbeta = match weighted_fbeta(y, t, h, w, config) {
        Ok(v) => Some(v),
        Err(Error::UndefinedMeasure(msg)) => {
            log::warn!("scene {scene_id}: {msg}; excluded from the F-beta mean");
            None
        }
        Err(e) => return Err(e),
    };
    Ok(SceneMetrics {
        scene_id: scene_id.to_string(),
        mae: mean_absolute_error(y, t)?,
        fbeta,
        s_measure: structure_measure(y, t, h, w, config.alpha)?,
    })
}

/// Stitches the cloud channel of row-major tile predictions and scores the scene.
pub fn evaluate_scene(
    tiles: &[ProbabilityMap],
    mask: &LabelMask,
    grid: &TileGrid,
    config: &MetricConfig,
) -> Result<SceneMetrics> {
    let rasters = tiles
        .iter()
        .map(|m| Raster::new(m.height(), m.width(), 1, m.cloud().to_vec()))
        .collect::<Result<Vec<_>>>()?;
    let stitched = stitch(&rasters, grid)?;
    let labels = &mask.labels;
    if labels.height() != stitched.height() || labels.width() != stitched.width() {
        return Err(Error::shape(format!(
            "label mask {}x{} does not match the {}x{} grid",
            labels.height(),
            labels.width(),
            stitched.height(),
            stitched.width()
        )));
    }
    evaluate_map(
        &mask.scene_id,
        stitched.data(),
        labels.data(),
        labels.height(),
        labels.width(),
        config,
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: MetricConfig,
    pub scenes: Vec<SceneMetrics>,
    pub scene_count: usize,
    pub mean_mae: f64,
    /// Mean over scenes with a defined value.
    pub mean_fbeta: Option<f64>,
    pub mean_s_measure: f64,
}

impl EvalReport {
    pub fn new(config: MetricConfig, scenes: Vec<SceneMetrics>) -> Self {
        let n = scenes.len();
        let avg = |f: &dyn Fn(&SceneMetrics) -> f64| {
            if n == 0 {
                f64::NAN
            } else {
                scenes.iter().map(f).sum::<f64>() / n as f64
            }
        };
        let fb: Vec<f64> = scenes.iter().filter_map(|s| s.fbeta).collect();
        Self {
            config,
            scene_count: n,
            mean_mae: avg(&|s| s.mae),
            mean_fbeta: (!fb.is_empty()).then(|| fb.iter().sum::<f64>() / fb.len() as f64),
            mean_s_measure: avg(&|s| s.s_measure),
            scenes,
        }
    }

    /// Plain-text table: one row per scene then the mean.
    pub fn to_table(&self) -> String {
        let fmt_opt = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.4}"));
        let id_width = self
            .scenes
            .iter()
            .map(|s| s.scene_id.len())
            .max()
            .unwrap_or(0)
            .max(5);
        let mut out = format!(
            "beta^2={} sigma={} window={} decay={} alpha={}\n",
            self.config.beta2, self.config.sigma, self.config.window, self.config.decay, self.config.alpha
        );
        out += &format!("{:<id_width$}  {:>8}  {:>8}  {:>8}\n", "scene", "e_ma", "F_w", "S_m");
        for s in &self.scenes {
            out += &format!(
                "{:<id_width$}  {:>8.4}  {:>8}  {:>8.4}\n",
                s.scene_id,
                s.mae,
                fmt_opt(s.fbeta),
                s.s_measure
            );
        }
        out += &format!(
            "{:<id_width$}  {:>8.4}  {:>8}  {:>8.4}\n",
            "mean", self.mean_mae, fmt_opt(self.mean_fbeta), self.mean_s_measure
        );
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tiling::{crop, plan_grid};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn half_plane(h: usize, w: usize) -> Vec<u8> {
        (0..h * w).map(|i| u8::from(i % w < w / 2)).collect()
    }

    fn blob(h: usize, w: usize) -> Vec<u8> {
        (0..h * w)
            .map(|i| {
                let (r, c) = ((i / w) as f64, (i % w) as f64);
                u8::from((r - h as f64 / 2.0).powi(2) + (c - w as f64 / 2.0).powi(2) < (h as f64 / 4.0).powi(2))
            })
            .collect()
    }

    #[test]
    fn mae_examples() {
        let t = half_plane(4, 4);
        let y: Vec<f64> = t.iter().map(|&v| v as f64).collect();
        assert_eq!(mean_absolute_error(&y, &t).unwrap(), 0.0);
        let inv: Vec<f64> = y.iter().map(|v| 1.0 - v).collect();
        assert_eq!(mean_absolute_error(&inv, &t).unwrap(), 1.0);
        assert_eq!(mean_absolute_error(&[0.25; 9], &[0; 9]).unwrap(), 0.25);
        assert!(mean_absolute_error(&[0.0; 3], &[0; 4]).is_err());
    }

    #[test]
    fn distance_transform_small_cases() {
        // Single foreground pixel at (1, 2) in a 3x4 grid.
        let mut fg = vec![false; 12];
        fg[6] = true;
        let dt = distance_transform(&fg, 3, 4).unwrap();
        for i in 0..12 {
            let (r, c) = ((i / 4) as f64, (i % 4) as f64);
            assert!((dt.distance[i] - ((r - 1.0).powi(2) + (c - 2.0).powi(2)).sqrt()).abs() < 1e-12);
            assert_eq!(dt.nearest[i], 6);
        }
        assert!(distance_transform(&[false; 4], 2, 2).is_none());
        // Equidistant candidates resolve to the smaller column, then the smaller row.
        let mut fg = vec![false; 9];
        fg[1] = true; // (0, 1)
        fg[3] = true; // (1, 0)
        fg[5] = true; // (1, 2)
        fg[7] = true; // (2, 1)
        let dt = distance_transform(&fg, 3, 3).unwrap();
        assert_eq!(dt.nearest[4], 3);
        let mut fg = vec![false; 9];
        fg[1] = true;
        fg[7] = true;
        let dt = distance_transform(&fg, 3, 3).unwrap();
        assert_eq!(dt.nearest[4], 1);
    }

    #[test]
    fn fbeta_fixpoints() {
        let cfg = MetricConfig::default();
        let t = blob(16, 16);
        let y: Vec<f64> = t.iter().map(|&v| v as f64).collect();
        assert!((weighted_fbeta(&y, &t, 16, 16, &cfg).unwrap() - 1.0).abs() < 1e-6);
        // Zero prediction on foreground at least three pixels from the border.
        let zero = vec![0.0; 256];
        assert!(weighted_fbeta(&zero, &t, 16, 16, &cfg).unwrap().abs() < 1e-12);
        assert!(matches!(
            weighted_fbeta(&zero, &[0; 256], 16, 16, &cfg),
            Err(Error::UndefinedMeasure(_))
        ));
    }

    #[test]
    fn s_measure_examples() {
        let t = half_plane(8, 8);
        let y: Vec<f64> = t.iter().map(|&v| v as f64).collect();
        assert!((structure_measure(&y, &t, 8, 8, 0.5).unwrap() - 1.0).abs() < 1e-6);
        let inv: Vec<f64> = y.iter().map(|v| 1.0 - v).collect();
        assert!(structure_measure(&inv, &t, 8, 8, 0.5).unwrap() < 0.5);
        let y = vec![0.3; 16];
        assert!((structure_measure(&y, &[0; 16], 4, 4, 0.5).unwrap() - 0.7).abs() < 1e-12);
        assert!((structure_measure(&y, &[1; 16], 4, 4, 0.5).unwrap() - 0.3).abs() < 1e-12);
    }

    #[test]
    fn centroid_on_last_column_leaves_empty_blocks() {
        // All foreground in the last column: the split leaves the right blocks empty.
        let (h, w) = (4, 4);
        let t: Vec<u8> = (0..16).map(|i| u8::from(i % w == w - 1)).collect();
        assert_eq!(centroid(&t, h, w), (4, 3));
        let y: Vec<f64> = t.iter().map(|&v| v as f64).collect();
        let q = structure_measure(&y, &t, h, w, 0.5).unwrap();
        assert!(q.is_finite() && (0.0..=1.0).contains(&q));
    }

    #[test]
    fn scene_evaluation_is_transparent_to_stitching() {
        let (h, w) = (40, 50);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let labels = Raster::from_fn(h, w, 1, |r, c, _| u8::from((r as i32 - 20).pow(2) + (c as i32 - 25).pow(2) < 150));
        let cloud: Vec<f64> = labels.data().iter().map(|&l| l as f64 * 0.7 + rng.random::<f64>() * 0.3).collect();
        let grid = plan_grid(h, w, 32).unwrap();
        let tiles: Vec<ProbabilityMap> = crop(&Raster::new(h, w, 1, cloud.clone()).unwrap(), &grid)
            .unwrap()
            .iter()
            .map(|r| ProbabilityMap::from_cloud(32, 32, r.data()).unwrap())
            .collect();
        let mask = LabelMask::new(labels.clone(), "s").unwrap();
        let cfg = MetricConfig::default();
        let stitched = evaluate_scene(&tiles, &mask, &grid, &cfg).unwrap();
        let direct = evaluate_map("s", &cloud, labels.data(), h, w, &cfg).unwrap();
        assert_eq!(stitched, direct);

        let perfect: Vec<ProbabilityMap> = crop(&labels.map(|v| v as f64), &grid)
            .unwrap()
            .iter()
            .map(|r| ProbabilityMap::from_cloud(32, 32, r.data()).unwrap())
            .collect();
        let m = evaluate_scene(&perfect, &mask, &grid, &cfg).unwrap();
        assert_eq!(m.mae, 0.0);
        assert!((m.fbeta.unwrap() - 1.0).abs() < 1e-6);
        assert!((m.s_measure - 1.0).abs() < 1e-6);
    }

    #[test]
    fn report_means_are_per_scene() {
        let scenes = vec![
            SceneMetrics { scene_id: "a".into(), mae: 0.1, fbeta: Some(0.8), s_measure: 0.9 },
            SceneMetrics { scene_id: "b".into(), mae: 0.3, fbeta: None, s_measure: 0.7 },
            SceneMetrics { scene_id: "c".into(), mae: 0.2, fbeta: Some(0.6), s_measure: 0.5 },
        ];
        let r = EvalReport::new(MetricConfig::default(), scenes);
        assert_eq!(r.scene_count, 3);
        assert!((r.mean_mae - 0.2).abs() < 1e-15);
        assert!((r.mean_fbeta.unwrap() - 0.7).abs() < 1e-15);
        assert!((r.mean_s_measure - 0.7).abs() < 1e-15);
        let table = r.to_table();
        assert!(table.contains("e_ma") && table.contains("n/a") && table.contains("alpha=0.5"));
    }

    proptest! {
        #[test]
        fn metric_ranges_and_complement(seed in any::<u64>(), h in 2usize..12, w in 2usize..12) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let y: Vec<f64> = (0..h * w).map(|_| rng.random()).collect();
            let t: Vec<u8> = (0..h * w).map(|_| rng.random_range(0..2)).collect();
            let inv: Vec<f64> = y.iter().map(|v| 1.0 - v).collect();
            let a = mean_absolute_error(&y, &t).unwrap();
            let b = mean_absolute_error(&inv, &t).unwrap();
            prop_assert!((a + b - 1.0).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&a));
            let s = structure_measure(&y, &t, h, w, 0.5).unwrap();
            prop_assert!((0.0..=1.0).contains(&s));
            if t.contains(&1) {
                let f = weighted_fbeta(&y, &t, h, w, &MetricConfig::default()).unwrap();
                prop_assert!((0.0..=1.0).contains(&f));
            }
        }

        #[test]
        fn distance_matches_brute_force(seed in any::<u64>(), h in 1usize..10, w in 1usize..10) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let fg: Vec<bool> = (0..h * w).map(|_| rng.random_bool(0.2)).collect();
            prop_assume!(fg.iter().any(|&f| f));
            let dt = distance_transform(&fg, h, w).unwrap();
            for i in 0..h * w {
                let (r, c) = ((i / w) as i64, (i % w) as i64);
                let best = (0..h * w)
                    .filter(|&j| fg[j])
                    .map(|j| {
                        let (rj, cj) = ((j / w) as i64, (j % w) as i64);
                        ((r - rj).pow(2) + (c - cj).pow(2), cj, rj, j)
                    })
                    .min()
                    .unwrap();
                prop_assert_eq!(dt.nearest[i], best.3);
                prop_assert!((dt.distance[i] - (best.0 as f64).sqrt()).abs() < 1e-12);
            }
        }
    }
}
