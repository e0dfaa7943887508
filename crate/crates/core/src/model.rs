//! Full network: backbone, decoder and head, plus the ablation switches.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Mode, Var};
use crate::backbone::{Backbone, BackboneConfig, Level, INPUT_MULTIPLE};
use crate::decoder::{pyramid_reduced_channels, Decoder, DecoderConfig, ProbabilityMap};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Module switches for ablation runs. All `true` is the full model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationFlags {
    pub use_cascaded_fusion: bool,
    pub use_pyramid_pooling: bool,
    pub use_multi_resolution: bool,
    pub use_aug_view_loss: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self::FULL
    }
}

impl AblationFlags {
    pub const FULL: Self = Self {
        use_cascaded_fusion: true,
        use_pyramid_pooling: true,
        use_multi_resolution: true,
        use_aug_view_loss: true,
    };

    pub const NONE: Self = Self {
        use_cascaded_fusion: false,
        use_pyramid_pooling: false,
        use_multi_resolution: false,
        use_aug_view_loss: false,
    };

    /// Named single-switch variants in the order they are usually reported.
    pub fn variants() -> [(&'static str, Self); 4] {
        [
            (
                "without_cascaded_fusion",
                Self {
                    use_cascaded_fusion: false,
                    ..Self::FULL
                },
            ),
            (
                "without_pyramid_pooling",
                Self {
                    use_pyramid_pooling: false,
                    ..Self::FULL
                },
            ),
            (
                "without_multi_resolution",
                Self {
                    use_multi_resolution: false,
                    ..Self::FULL
                },
            ),
            (
                "without_aug_view_loss",
                Self {
                    use_aug_view_loss: false,
                    ..Self::FULL
                },
            ),
        ]
    }

    /// All 16 combinations.
    pub fn all_combinations() -> Vec<Self> {
        (0..16u8)
            .map(|b| Self {
                use_cascaded_fusion: b & 1 != 0,
                use_pyramid_pooling: b & 2 != 0,
                use_multi_resolution: b & 4 != 0,
                use_aug_view_loss: b & 8 != 0,
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Side of the square training tiles.
    pub tile_size: usize,
    pub backbone: BackboneConfig,
    pub decoder: DecoderConfig,
    pub ablation: AblationFlags,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            tile_size: 352,
            backbone: BackboneConfig::default(),
            decoder: DecoderConfig::default(),
            ablation: AblationFlags::FULL,
        }
    }
}

impl ModelConfig {
    /// W = 8 on 64-pixel tiles.
    pub fn desk() -> Self {
        Self {
            tile_size: 64,
            backbone: BackboneConfig::desk(),
            decoder: DecoderConfig::default(),
            ablation: AblationFlags::FULL,
        }
    }

    /// Branch widths the decoder receives.
    pub fn branch_widths(&self) -> Vec<usize> {
        let w = self.backbone.widths();
        if self.ablation.use_multi_resolution {
            w.to_vec()
        } else {
            vec![w[0]]
        }
    }

    pub fn aggregated_channels(&self) -> usize {
        self.branch_widths().iter().sum()
    }

    /// Parameters owned by the pyramid-pooling branches, and the extra head input
    /// weights their channels require.
    pub fn pyramid_parameter_delta(&self) -> usize {
        let c = self.aggregated_channels();
        let r = pyramid_reduced_channels(c);
        let bins = self.decoder.pyramid_bins.len();
        bins * (c * r + r) + bins * r * self.decoder.head_channels
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.decoder.validate()?;
        if self.tile_size == 0 || self.tile_size % INPUT_MULTIPLE != 0 {
            return Err(Error::config(format!(
                "model.tile_size {} must be a positive multiple of {INPUT_MULTIPLE}",
                self.tile_size
            )));
        }
        let map = self.tile_size / Level::QUARTER.factor();
        if self.ablation.use_pyramid_pooling {
            let largest = *self.decoder.pyramid_bins.last().expect("validated non-empty");
            if largest > map {
                return Err(Error::config(format!(
                    "pyramid bin {largest} exceeds the {map}x{map} aggregated map of a {} tile",
                    self.tile_size
                )));
            }
            let c = self.aggregated_channels();
            if pyramid_reduced_channels(c) == 0 {
                return Err(Error::config(format!(
                    "pyramid pooling needs at least 4 aggregated channels, got {c}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct HrCloudNet {
    config: ModelConfig,
    pub backbone: Backbone,
    pub decoder: Decoder,
}

/// Builds the network and its freshly initialised parameters from a seed.
pub fn build_model(config: &ModelConfig, seed: u64) -> Result<(HrCloudNet, ParamStore)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let flags = config.ablation;
    let backbone = Backbone::new(&mut store, &mut rng, &config.backbone, flags.use_multi_resolution)?;
    let decoder = Decoder::new(
        &mut store,
        &mut rng,
        &config.decoder,
        &config.branch_widths(),
        flags.use_cascaded_fusion,
        flags.use_pyramid_pooling,
    )?;
    Ok((
        HrCloudNet {
            config: config.clone(),
            backbone,
            decoder,
        },
        store,
    ))
}

impl HrCloudNet {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// `[n, 3, h, w]` pixels to `[n, 2, h, w]` probabilities.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        let features = self.backbone.forward(g, x)?;
        self.decoder.forward(g, &features, shape[2], shape[3])
    }

    /// Evaluation-mode forward pass on a batch; leaves `store` untouched.
    pub fn predict_batch(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new(store, Mode::Eval);
        let xv = g.input(x.clone());
        let y = self.forward(&mut g, xv)?;
        Ok(g.value(y).clone())
    }

    pub fn predict(&self, store: &ParamStore, x: &Tensor) -> Result<Vec<ProbabilityMap>> {
        ProbabilityMap::from_batch(&self.predict_batch(store, x)?)
    }
}
