//! Decoder: cascaded fusion of the encoder branches, aggregation at 1/4 resolution,
//! pyramid pooling and the two-class head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::backbone::{FeatureMap, Level};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, ConvBn};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Probability threshold at which a pixel is labelled cloud.
pub const CLOUD_THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    /// Adaptive pooling output sizes, strictly increasing.
    pub pyramid_bins: Vec<usize>,
    /// Width of the hidden 1x1 block in the head.
    pub head_channels: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            pyramid_bins: vec![1, 2, 3, 6],
            head_channels: 64,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pyramid_bins.is_empty() {
            return Err(Error::config("decoder.pyramid_bins must not be empty"));
        }
        if self.pyramid_bins[0] == 0 {
            return Err(Error::config("decoder.pyramid_bins must be positive"));
        }
        if self.pyramid_bins.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config(format!(
                "decoder.pyramid_bins must be strictly increasing, got {:?}",
                self.pyramid_bins
            )));
        }
        if self.head_channels == 0 {
            return Err(Error::config("decoder.head_channels must be at least 1"));
        }
        Ok(())
    }
}

/// Per-pixel two-class distribution `[2, h, w]`; channel 0 background, channel 1 cloud.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityMap {
    values: Tensor,
}

impl ProbabilityMap {
    pub fn new(values: Tensor) -> Result<Self> {
        if values.shape().len() != 3 || values.shape()[0] != 2 {
            return Err(Error::shape(format!(
                "probability map must be [2, h, w], got {:?}",
                values.shape()
            )));
        }
        Ok(Self { values })
    }

    /// Builds a map from cloud probabilities alone.
    pub fn from_cloud(height: usize, width: usize, cloud: &[f64]) -> Result<Self> {
        if cloud.len() != height * width {
            return Err(Error::shape(format!(
                "{} cloud values for a {height}x{width} map",
                cloud.len()
            )));
        }
        let mut data = Vec::with_capacity(2 * cloud.len());
        data.extend(cloud.iter().map(|p| 1.0 - p));
        data.extend_from_slice(cloud);
        Ok(Self {
            values: Tensor::new(&[2, height, width], data)?,
        })
    }

    /// Splits a `[n, 2, h, w]` batch into per-item maps.
    pub fn from_batch(batch: &Tensor) -> Result<Vec<Self>> {
        let (n, c, h, w) = batch.dims4();
        if c != 2 {
            return Err(Error::shape(format!("expected 2 channels, got {c}")));
        }
        (0..n)
            .map(|i| Self::new(batch.batch_slice(i, 1).reshape(&[2, h, w])?))
            .collect()
    }

    pub fn height(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.values
    }

    pub fn background(&self) -> &[f64] {
        &self.values.data()[..self.height() * self.width()]
    }

    pub fn cloud(&self) -> &[f64] {
        &self.values.data()[self.height() * self.width()..]
    }

    /// Largest deviation from the distribution invariant: negative mass, mass above 1,
    /// or channel sums away from 1.
    pub fn distribution_error(&self) -> f64 {
        self.background()
            .iter()
            .zip(self.cloud())
            .map(|(&b, &c)| {
                let range = (-b).max(-c).max(b - 1.0).max(c - 1.0).max(0.0);
                range.max((b + c - 1.0).abs())
            })
            .fold(0.0, f64::max)
    }

    pub fn is_valid(&self, tol: f64) -> bool {
        self.values.all_finite() && self.distribution_error() <= tol
    }

    /// Hard labels: 1 where the cloud probability reaches [`CLOUD_THRESHOLD`].
    pub fn binarize(&self) -> Vec<u8> {
        self.cloud()
            .iter()
            .map(|&p| u8::from(p >= CLOUD_THRESHOLD))
            .collect()
    }
}

/// Two 3x3 ConvBlocks on `[F_k, up(f_{k+1})]`; output keeps the width of `F_k`.
#[derive(Clone, Debug)]
pub struct CascadeStep {
    pub level: Level,
    pub block1: ConvBn,
    pub block2: ConvBn,
    in_channels: usize,
    lower_channels: usize,
}

impl CascadeStep {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        level: Level,
        channels: usize,
        lower_channels: usize,
    ) -> Self {
        Self {
            level,
            block1: ConvBn::new(
                store,
                rng,
                &format!("{name}.block1"),
                channels + lower_channels,
                channels,
                3,
                1,
                true,
            ),
            block2: ConvBn::new(store, rng, &format!("{name}.block2"), channels, channels, 3, 1, true),
            in_channels: channels,
            lower_channels,
        }
    }

    pub fn forward(&self, g: &mut Graph, f_k: &FeatureMap, f_lower: &FeatureMap) -> Result<FeatureMap> {
        if f_k.level != self.level || f_k.level.lower() != Some(f_lower.level) {
            return Err(Error::Contract(format!(
                "cascade step at {} cannot fuse {} with {}",
                self.level, f_k.level, f_lower.level
            )));
        }
        let (c, h, w) = f_k.dims(g);
        let (cl, _, _) = f_lower.dims(g);
        if c != self.in_channels || cl != self.lower_channels {
            return Err(Error::shape(format!(
                "cascade step at {} expects {}+{} channels, got {c}+{cl}",
                self.level, self.in_channels, self.lower_channels
            )));
        }
        let up = g.resize_bilinear(f_lower.var, h, w);
        let cat = g.concat(&[f_k.var, up]);
        let y = self.block1.forward(g, cat);
        let y = self.block2.forward(g, y);
        Ok(FeatureMap::new(y, f_k.level))
    }
}

/// Upsamples every map to the first map's size and concatenates them in order.
/// Maps must cover consecutive levels starting at 1/4.
pub fn aggregate_branches(g: &mut Graph, maps: &[FeatureMap]) -> Result<FeatureMap> {
    let Some(first) = maps.first() else {
        return Err(Error::Contract("no branches to aggregate".into()));
    };
    for (i, m) in maps.iter().enumerate() {
        if Level::from_index(i) != Some(m.level) {
            return Err(Error::Contract(format!(
                "branch {i} is at level {}, expected {}; a branch is missing",
                m.level,
                Level::from_index(i).map_or("none".to_string(), |l| l.to_string())
            )));
        }
    }
    let (_, h, w) = first.dims(g);
    let vars: Vec<Var> = maps
        .iter()
        .map(|m| {
            if m.level == first.level {
                m.var
            } else {
                g.resize_bilinear(m.var, h, w)
            }
        })
        .collect();
    let y = if vars.len() == 1 { vars[0] } else { g.concat(&vars) };
    Ok(FeatureMap::new(y, first.level))
}

/// Reduced branch width for an aggregated map with `channels` channels.
pub fn pyramid_reduced_channels(channels: usize) -> usize {
    channels / 4
}

/// Adaptive pooling at each bin size, 1x1 conv to a quarter of the channels, ReLU,
/// upsampling back, and concatenation after the input.
#[derive(Clone, Debug)]
pub struct PyramidPooling {
    bins: Vec<usize>,
    pub convs: Vec<Conv2d>,
    pub in_channels: usize,
    pub reduced_channels: usize,
}

impl PyramidPooling {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        in_channels: usize,
        bins: &[usize],
    ) -> Result<Self> {
        let reduced = pyramid_reduced_channels(in_channels);
        if reduced == 0 {
            return Err(Error::config(format!(
                "pyramid pooling needs at least 4 input channels, got {in_channels}"
            )));
        }
        let convs = bins
            .iter()
            .map(|b| Conv2d::new(store, rng, &format!("{name}.bin{b}"), in_channels, reduced, 1, 1, true))
            .collect();
        Ok(Self {
            bins: bins.to_vec(),
            convs,
            in_channels,
            reduced_channels: reduced,
        })
    }

    pub fn bins(&self) -> &[usize] {
        &self.bins
    }

    pub fn out_channels(&self) -> usize {
        self.in_channels + self.bins.len() * self.reduced_channels
    }

    pub fn parameter_count(&self) -> usize {
        self.convs.iter().map(Conv2d::parameter_count).sum()
    }

    pub fn forward(&self, g: &mut Graph, x: &FeatureMap) -> Result<FeatureMap> {
        let (c, h, w) = x.dims(g);
        if c != self.in_channels {
            return Err(Error::shape(format!(
                "pyramid pooling expects {} channels, got {c}",
                self.in_channels
            )));
        }
        let mut parts = vec![x.var];
        for (&b, conv) in self.bins.iter().zip(&self.convs) {
            // Bins larger than the map are capped at the map size.
            let pooled = g.adaptive_avg_pool(x.var, b.min(h), b.min(w));
            let y = conv.forward(g, pooled);
            let y = g.relu(y);
            parts.push(g.resize_bilinear(y, h, w));
        }
        Ok(FeatureMap::new(g.concat(&parts), x.level))
    }
}

/// 1x1 ConvBlock, 1x1 conv to two logits, bilinear upsampling, channel softmax.
#[derive(Clone, Debug)]
pub struct ClassifyHead {
    pub hidden: ConvBn,
    pub logits: Conv2d,
}

impl ClassifyHead {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        in_channels: usize,
        hidden_channels: usize,
    ) -> Self {
        Self {
            hidden: ConvBn::new(store, rng, &format!("{name}.hidden"), in_channels, hidden_channels, 1, 1, true),
            logits: Conv2d::new(store, rng, &format!("{name}.logits"), hidden_channels, 2, 1, 1, true),
        }
    }

    pub fn parameter_count(&self, in_channels: usize) -> usize {
        let hidden = self.hidden.conv.out_channels;
        in_channels * hidden + 2 * hidden + self.logits.parameter_count()
    }

    /// Returns `[n, 2, out_h, out_w]` probabilities.
    pub fn forward(&self, g: &mut Graph, x: &FeatureMap, out_h: usize, out_w: usize) -> Result<Var> {
        let (c, _, _) = x.dims(g);
        if c != self.hidden.conv.in_channels {
            return Err(Error::shape(format!(
                "head expects {} channels, got {c}",
                self.hidden.conv.in_channels
            )));
        }
        let y = self.hidden.forward(g, x.var);
        let y = self.logits.forward(g, y);
        let y = g.resize_bilinear(y, out_h, out_w);
        Ok(g.softmax_channels(y))
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    branch_widths: Vec<usize>,
    /// `cascade[k]` produces `f_{k+1}` from `F_{k+1}` and `f_{k+2}`.
    pub cascade: Option<Vec<CascadeStep>>,
    pub pyramid: Option<PyramidPooling>,
    pub head: ClassifyHead,
}

impl Decoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        config: &DecoderConfig,
        branch_widths: &[usize],
        use_cascaded_fusion: bool,
        use_pyramid_pooling: bool,
    ) -> Result<Self> {
        config.validate()?;
        if branch_widths.is_empty() || branch_widths.len() > Level::ALL.len() {
            return Err(Error::config(format!(
                "decoder needs 1 to 4 branches, got {}",
                branch_widths.len()
            )));
        }
        let cascade = use_cascaded_fusion.then(|| {
            (0..branch_widths.len() - 1)
                .rev()
                .map(|k| {
                    CascadeStep::new(
                        store,
                        rng,
                        &format!("decoder.cascade{}", k + 1),
                        Level::ALL[k],
                        branch_widths[k],
                        branch_widths[k + 1],
                    )
                })
                .collect::<Vec<_>>()
        });
        let aggregated: usize = branch_widths.iter().sum();
        let pyramid = if use_pyramid_pooling {
            Some(PyramidPooling::new(
                store,
                rng,
                "decoder.pyramid",
                aggregated,
                &config.pyramid_bins,
            )?)
        } else {
            None
        };
        let head_in = pyramid.as_ref().map_or(aggregated, PyramidPooling::out_channels);
        let head = ClassifyHead::new(store, rng, "decoder.head", head_in, config.head_channels);
        Ok(Self {
            branch_widths: branch_widths.to_vec(),
            cascade,
            pyramid,
            head,
        })
    }

    pub fn aggregated_channels(&self) -> usize {
        self.branch_widths.iter().sum()
    }

    /// Runs the cascade from the lowest resolution upwards; without cascade the
    /// encoder maps are passed through unchanged.
    pub fn fuse(&self, g: &mut Graph, features: &[FeatureMap]) -> Result<Vec<FeatureMap>> {
        if features.len() != self.branch_widths.len() {
            return Err(Error::Contract(format!(
                "decoder expects {} branches, got {}",
                self.branch_widths.len(),
                features.len()
            )));
        }
        let Some(steps) = &self.cascade else {
            return Ok(features.to_vec());
        };
        let mut fused = features.to_vec();
        for step in steps {
            let k = step.level.index();
            fused[k] = step.forward(g, &features[k], &fused[k + 1])?;
        }
        Ok(fused)
    }

    pub fn forward(&self, g: &mut Graph, features: &[FeatureMap], out_h: usize, out_w: usize) -> Result<Var> {
        let fused = self.fuse(g, features)?;
        let agg = aggregate_branches(g, &fused)?;
        let x = match &self.pyramid {
            Some(p) => p.forward(g, &agg)?,
            None => agg,
        };
        self.head.forward(g, &x, out_h, out_w)
    }
}
