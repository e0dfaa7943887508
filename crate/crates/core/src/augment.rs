//! Photometric strong augmentation for the student view.
//!
//! Transforms are applied in the fixed order jitter, grayscale, blur. Every random draw
//! is captured in an [`AugmentationTrace`] so the same output can be rebuilt from the
//! input and the trace alone.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tiling::Raster;

/// Luma weights for grayscale conversion.
const LUMA: [f32; 3] = [0.299, 0.587, 0.114];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationConfig {
    pub p_color_jitter: f64,
    pub p_grayscale: f64,
    pub p_blur: f64,
    /// Brightness factor is drawn from `[1 - s, 1 + s]`; same for contrast and saturation.
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    /// Hue shift drawn from `[-hue, hue]`, as a fraction of the colour wheel.
    pub hue: f64,
    pub blur_sigma_min: f64,
    pub blur_sigma_max: f64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            p_color_jitter: 0.8,
            p_grayscale: 0.2,
            p_blur: 0.5,
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.4,
            hue: 0.1,
            blur_sigma_min: 0.1,
            blur_sigma_max: 2.0,
        }
    }
}

impl AugmentationConfig {
    /// Never fires any transform.
    pub fn disabled() -> Self {
        Self {
            p_color_jitter: 0.0,
            p_grayscale: 0.0,
            p_blur: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("augmentation.p_color_jitter", self.p_color_jitter),
            ("augmentation.p_grayscale", self.p_grayscale),
            ("augmentation.p_blur", self.p_blur),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        for (name, s) in [
            ("augmentation.brightness", self.brightness),
            ("augmentation.contrast", self.contrast),
            ("augmentation.saturation", self.saturation),
        ] {
            if !(0.0..=1.0).contains(&s) {
                return Err(Error::config(format!("{name} must lie in [0, 1], got {s}")));
            }
        }
        if !(0.0..=0.5).contains(&self.hue) {
            return Err(Error::config(format!(
                "augmentation.hue must lie in [0, 0.5], got {}",
                self.hue
            )));
        }
        if !(self.blur_sigma_min > 0.0 && self.blur_sigma_min <= self.blur_sigma_max && self.blur_sigma_max.is_finite()) {
            return Err(Error::config(format!(
                "augmentation blur sigma range [{}, {}] must be positive and ordered",
                self.blur_sigma_min, self.blur_sigma_max
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JitterOp {
    Brightness,
    Contrast,
    Saturation,
    Hue,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JitterParams {
    pub order: [JitterOp; 4],
    pub brightness: f32,
    pub contrast: f32,
    pub saturation: f32,
    pub hue: f32,
}

/// Which transforms fired and with what parameters.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AugmentationTrace {
    pub jitter: Option<JitterParams>,
    pub grayscale: bool,
    pub blur_sigma: Option<f32>,
}

impl AugmentationTrace {
    pub fn is_identity(&self) -> bool {
        self.jitter.is_none() && !self.grayscale && self.blur_sigma.is_none()
    }
}

fn factor<R: Rng + ?Sized>(rng: &mut R, strength: f64) -> f32 {
    if strength == 0.0 {
        1.0
    } else {
        rng.random_range(1.0 - strength..=1.0 + strength) as f32
    }
}

/// Draws a trace. The three firing decisions are always drawn, in order, so that
/// their rates stay independent of the parameters.
pub fn sample_trace<R: Rng + ?Sized>(config: &AugmentationConfig, rng: &mut R) -> AugmentationTrace {
    let jitter_fires = rng.random_bool(config.p_color_jitter);
    let jitter = jitter_fires.then(|| {
        let mut order = [JitterOp::Brightness, JitterOp::Contrast, JitterOp::Saturation, JitterOp::Hue];
        order.shuffle(rng);
        JitterParams {
            order,
            brightness: factor(rng, config.brightness),
            contrast: factor(rng, config.contrast),
            saturation: factor(rng, config.saturation),
            hue: if config.hue == 0.0 {
                0.0
            } else {
                rng.random_range(-config.hue..=config.hue) as f32
            },
        }
    });
    let grayscale = rng.random_bool(config.p_grayscale);
    let blur_fires = rng.random_bool(config.p_blur);
    let blur_sigma = blur_fires.then(|| rng.random_range(config.blur_sigma_min..=config.blur_sigma_max) as f32);
    AugmentationTrace {
        jitter,
        grayscale,
        blur_sigma,
    }
}

fn check_rgb(image: &Raster<f32>) -> Result<()> {
    if image.channels() != 3 {
        return Err(Error::shape(format!("augmentation needs 3 channels, got {}", image.channels())));
    }
    Ok(())
}

/// Returns the augmented image and the trace that reproduces it.
pub fn augment<R: Rng + ?Sized>(
    image: &Raster<f32>,
    config: &AugmentationConfig,
    rng: &mut R,
) -> Result<(Raster<f32>, AugmentationTrace)> {
    check_rgb(image)?;
    let trace = sample_trace(config, rng);
    let out = apply_trace(image, &trace)?;
    Ok((out, trace))
}

/// Teacher view (the image itself) and student view.
pub fn make_view_pair<R: Rng + ?Sized>(
    image: &Raster<f32>,
    config: &AugmentationConfig,
    rng: &mut R,
) -> Result<(Raster<f32>, Raster<f32>, AugmentationTrace)> {
    let (aug, trace) = augment(image, config, rng)?;
    Ok((image.clone(), aug, trace))
}

pub fn apply_trace(image: &Raster<f32>, trace: &AugmentationTrace) -> Result<Raster<f32>> {
    check_rgb(image)?;
    let mut out = image.clone();
    if let Some(j) = &trace.jitter {
        for op in j.order {
            match op {
                JitterOp::Brightness => adjust_brightness(&mut out, j.brightness),
                JitterOp::Contrast => adjust_contrast(&mut out, j.contrast),
                JitterOp::Saturation => adjust_saturation(&mut out, j.saturation),
                JitterOp::Hue => adjust_hue(&mut out, j.hue),
            }
        }
    }
    if trace.grayscale {
        to_grayscale(&mut out);
    }
    if let Some(sigma) = trace.blur_sigma {
        out = gaussian_blur(&out, sigma);
    }
    Ok(out)
}

fn luma(px: &[f32]) -> f32 {
    LUMA[0] * px[0] + LUMA[1] * px[1] + LUMA[2] * px[2]
}

fn blend(a: f32, b: f32, f: f32) -> f32 {
    (f * a + (1.0 - f) * b).clamp(0.0, 1.0)
}

pub fn adjust_brightness(image: &mut Raster<f32>, f: f32) {
    for v in image.data_mut() {
        *v = (*v * f).clamp(0.0, 1.0);
    }
}

/// Blends towards the mean luma of the whole image.
pub fn adjust_contrast(image: &mut Raster<f32>, f: f32) {
    let n = (image.height() * image.width()).max(1);
    let mean = (image.data().chunks_exact(3).map(|p| luma(p) as f64).sum::<f64>() / n as f64) as f32;
    for v in image.data_mut() {
        *v = blend(*v, mean, f);
    }
}

/// Blends each pixel towards its own luma.
pub fn adjust_saturation(image: &mut Raster<f32>, f: f32) {
    for px in image.data_mut().chunks_exact_mut(3) {
        let g = luma(px);
        for v in px {
            *v = blend(*v, g, f);
        }
    }
}

/// Rotates hue by `shift` turns in HSV space.
pub fn adjust_hue(image: &mut Raster<f32>, shift: f32) {
    if shift == 0.0 {
        return;
    }
    for px in image.data_mut().chunks_exact_mut(3) {
        let (h, s, v) = rgb_to_hsv(px[0], px[1], px[2]);
        let h = (h + shift).rem_euclid(1.0);
        let (r, g, b) = hsv_to_rgb(h, s, v);
        px[0] = r.clamp(0.0, 1.0);
        px[1] = g.clamp(0.0, 1.0);
        px[2] = b.clamp(0.0, 1.0);
    }
}

fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let maxc = r.max(g).max(b);
    let minc = r.min(g).min(b);
    let cr = maxc - minc;
    let s = if maxc > 0.0 { cr / maxc } else { 0.0 };
    if cr == 0.0 {
        return (0.0, s, maxc);
    }
    let rc = (maxc - r) / cr;
    let gc = (maxc - g) / cr;
    let bc = (maxc - b) / cr;
    let h = if maxc == r {
        bc - gc
    } else if maxc == g {
        2.0 + rc - bc
    } else {
        4.0 + gc - rc
    };
    ((h / 6.0).rem_euclid(1.0), s, maxc)
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let h6 = h * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match (i as i64).rem_euclid(6) {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

pub fn to_grayscale(image: &mut Raster<f32>) {
    for px in image.data_mut().chunks_exact_mut(3) {
        let g = luma(px).clamp(0.0, 1.0);
        px.fill(g);
    }
}

fn mirror(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let k = i.rem_euclid(period);
    (if k < n as isize { k } else { period - k }) as usize
}

/// Normalised Gaussian taps for radius `ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f32) -> Vec<f32> {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|x| (-((x * x) as f64) / (2.0 * (sigma as f64).powi(2))).exp())
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.iter().map(|t| (t / sum) as f32).collect()
}

/// Separable Gaussian blur with reflected borders.
pub fn gaussian_blur(image: &Raster<f32>, sigma: f32) -> Raster<f32> {
    let kernel = gaussian_kernel(sigma);
    let r = (kernel.len() / 2) as isize;
    let (h, w, c) = (image.height(), image.width(), image.channels());
    let src = image.data();
    let mut tmp = vec![0.0f32; src.len()];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (k, &kv) in kernel.iter().enumerate() {
                    let xx = mirror(x as isize + k as isize - r, w);
                    acc += kv * src[(y * w + xx) * c + ch];
                }
                tmp[(y * w + x) * c + ch] = acc;
            }
        }
    }
    Raster::from_fn(h, w, c, |y, x, ch| {
        let mut acc = 0.0;
        for (k, &kv) in kernel.iter().enumerate() {
            let yy = mirror(y as isize + k as isize - r, h);
            acc += kv * tmp[(yy * w + x) * c + ch];
        }
        acc.clamp(0.0, 1.0)
    })
}
