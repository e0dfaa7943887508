//! Single-file checkpoints in the safetensors layout.
//!
//! Tensors are little-endian f64 under `param/<name>`, `buffer/<name>`, `adam_m/<name>`
//! and `adam_v/<name>`. The header metadata carries the format tag, the full training
//! configuration as JSON, its SHA-256 fingerprint and the progress counters. Random
//! streams are derived from the seed and the counters, so no generator state is stored.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{build_model, HrCloudNet};
use crate::optim::AdamState;
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::trainer::{Progress, TrainConfig};

pub const FORMAT_TAG: &str = "hrcloud-checkpoint/1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub store: ParamStore,
    pub adam: AdamState,
    pub progress: Progress,
}

/// Hex SHA-256 of the configuration's JSON form.
pub fn config_fingerprint(config: &TrainConfig) -> String {
    let json = serde_json::to_string(config).expect("serialisable config");
    format!("{:x}", Sha256::digest(json.as_bytes()))
}

fn to_bytes(t: &Tensor) -> Vec<u8> {
    t.data().iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn from_view(name: &str, view: &TensorView) -> Result<Tensor> {
    if view.dtype() != Dtype::F64 {
        return Err(Error::Checkpoint(format!("tensor `{name}` is {:?}, expected F64", view.dtype())));
    }
    let data = view
        .data()
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Tensor::new(view.shape(), data)
}

impl Checkpoint {
    /// The network structure described by the embedded configuration.
    pub fn model(&self) -> Result<HrCloudNet> {
        Ok(build_model(&self.config.model, self.config.optimizer.seed)?.0)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut owned: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
        for p in self.store.params() {
            owned.push((format!("param/{}", p.name), p.value.shape().to_vec(), to_bytes(&p.value)));
        }
        for b in self.store.buffers() {
            owned.push((format!("buffer/{}", b.name), b.value.shape().to_vec(), to_bytes(&b.value)));
        }
        for (i, p) in self.store.params().iter().enumerate() {
            owned.push((format!("adam_m/{}", p.name), p.value.shape().to_vec(), to_bytes(&self.adam.m[i])));
            owned.push((format!("adam_v/{}", p.name), p.value.shape().to_vec(), to_bytes(&self.adam.v[i])));
        }
        let views = owned
            .iter()
            .map(|(n, s, d)| Ok((n.as_str(), TensorView::new(Dtype::F64, s.clone(), d)?)))
            .collect::<std::result::Result<Vec<_>, safetensors::SafeTensorError>>()
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let meta = HashMap::from([
            ("format".to_string(), FORMAT_TAG.to_string()),
            (
                "config".to_string(),
                serde_json::to_string(&self.config).expect("serialisable config"),
            ),
            ("fingerprint".to_string(), config_fingerprint(&self.config)),
            (
                "progress".to_string(),
                serde_json::to_string(&self.progress).expect("plain counters"),
            ),
            ("adam_step".to_string(), self.adam.step.to_string()),
        ]);
        safetensors::serialize(views, Some(meta)).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    /// Parses and validates an archive: every parameter, buffer and moment the embedded
    /// configuration implies must be present with the right shape, and nothing else.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let ck = |e: safetensors::SafeTensorError| Error::Checkpoint(e.to_string());
        let (_, header) = SafeTensors::read_metadata(bytes).map_err(ck)?;
        let meta = header
            .metadata()
            .clone()
            .ok_or_else(|| Error::Checkpoint("archive has no metadata".into()))?;
        let field = |key: &str| {
            meta.get(key)
                .ok_or_else(|| Error::Checkpoint(format!("metadata field `{key}` missing")))
        };
        if field("format")? != FORMAT_TAG {
            return Err(Error::Checkpoint(format!(
                "format `{}` is not {FORMAT_TAG}",
                field("format")?
            )));
        }
        let config: TrainConfig = serde_json::from_str(field("config")?)
            .map_err(|e| Error::Checkpoint(format!("embedded config: {e}")))?;
        if &config_fingerprint(&config) != field("fingerprint")? {
            return Err(Error::Checkpoint("config fingerprint does not match the embedded config".into()));
        }
        let progress: Progress = serde_json::from_str(field("progress")?)
            .map_err(|e| Error::Checkpoint(format!("progress counters: {e}")))?;
        let adam_step: u64 = field("adam_step")?
            .parse()
            .map_err(|e| Error::Checkpoint(format!("adam_step: {e}")))?;

        let archive = SafeTensors::deserialize(bytes).map_err(ck)?;
        let mut groups: BTreeMap<&str, BTreeMap<String, Tensor>> = BTreeMap::new();
        for (name, view) in archive.tensors() {
            let (group, rest) = name
                .split_once('/')
                .ok_or_else(|| Error::Checkpoint(format!("tensor `{name}` has no group prefix")))?;
            let group = match group {
                "param" => "param",
                "buffer" => "buffer",
                "adam_m" => "adam_m",
                "adam_v" => "adam_v",
                other => return Err(Error::Checkpoint(format!("unknown tensor group `{other}`"))),
            };
            groups
                .entry(group)
                .or_default()
                .insert(rest.to_string(), from_view(&name, &view)?);
        }
        let mut take = |g: &str| groups.remove(g).unwrap_or_default();

        let (_, mut store) = build_model(&config.model, config.optimizer.seed)?;
        store.load_values(take("param"), take("buffer"))?;
        let mut adam = AdamState::new(&store);
        adam.step = adam_step;
        for (kind, slots, mut values) in [
            ("adam_m", &mut adam.m, take("adam_m")),
            ("adam_v", &mut adam.v, take("adam_v")),
        ] {
            for (i, p) in store.params().iter().enumerate() {
                let v = values
                    .remove(&p.name)
                    .ok_or_else(|| Error::Checkpoint(format!("{kind} `{}` missing from archive", p.name)))?;
                if v.shape() != p.value.shape() {
                    return Err(Error::Checkpoint(format!(
                        "{kind} `{}` has shape {:?}, model expects {:?}",
                        p.name,
                        v.shape(),
                        p.value.shape()
                    )));
                }
                slots[i] = v;
            }
            if let Some(extra) = values.keys().next() {
                return Err(Error::Checkpoint(format!("archive holds unknown {kind} `{extra}`")));
            }
        }
        Ok(Self {
            config,
            store,
            adam,
            progress,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::{tile_samples, Trainer};
    use crate::synthetic::synthetic_scene;

    fn trainer() -> Trainer {
        let mut cfg = TrainConfig::desk();
        cfg.model.tile_size = 32;
        cfg.optimizer.batch_size = 2;
        Trainer::new(cfg).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let mut tr = trainer();
        let scenes = vec![synthetic_scene(32, 64, 1, "a").unwrap()];
        let samples = tile_samples(&scenes, 32).unwrap();
        let batch = tr.make_batch(&samples, &[0, 1], 0).unwrap();
        tr.train_step(&batch).unwrap();
        tr.progress.step = 1;
        tr.progress.cursor = 2;
        tr.progress.epoch_steps = 1;
        tr.progress.epoch_total = 0.1 + 0.2;
        let ck = tr.checkpoint();
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back, ck);
    }

    #[test]
    fn rejects_shape_drift_and_tampering() {
        let tr = trainer();
        let bytes = tr.checkpoint().to_bytes().unwrap();
        let mut other = tr.checkpoint();
        other.config.model.backbone.base_width += 1;
        let (_, store) = build_model(&other.config.model, 0).unwrap();
        other.adam = AdamState::new(&store);
        // Right config, wrong tensors.
        let mut mixed = other.clone();
        mixed.store = tr.store.clone();
        mixed.adam = tr.adam.clone();
        let err = Checkpoint::from_bytes(&mixed.to_bytes().unwrap()).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(_)), "{err}");
        // Garbage header.
        assert!(Checkpoint::from_bytes(&bytes[..16]).is_err());
    }

    #[test]
    fn fingerprint_tracks_config() {
        let a = TrainConfig::desk();
        let mut b = a.clone();
        assert_eq!(config_fingerprint(&a), config_fingerprint(&b));
        b.loss.lambda1 = 0.25;
        assert_ne!(config_fingerprint(&a), config_fingerprint(&b));
        assert_eq!(config_fingerprint(&a).len(), 64);
    }
}
