//! Two-view training loop, epoch scheduling, evaluation and the lambda sweep.
//!
//! Every random stream is derived from the run seed, so a run is reproduced exactly by
//! the configuration plus the [`Progress`] counters: the model init uses the seed
//! directly, the epoch permutation is keyed by the epoch, and the student-view
//! augmentation of a step is keyed by the global step.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{make_view_pair, AugmentationConfig};
use crate::autograd::{Graph, Mode};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::inference::evaluate_scenes;
use crate::loss::{total_loss_graph, LossBreakdown, LossConfig};
use crate::metrics::{EvalReport, MetricConfig};
use crate::model::{build_model, HrCloudNet, ModelConfig};
use crate::optim::{AdamState, OptimizerConfig};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::tiling::{crop, encode_label, plan_grid, LabelMask, Raster, SceneImage};

const SHUFFLE_STREAM: u64 = 1 << 56;
const AUGMENT_STREAM: u64 = 2 << 56;

/// Everything that determines a training run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    pub loss: LossConfig,
    pub augmentation: AugmentationConfig,
    pub metrics: MetricConfig,
    /// Stop after this many optimizer steps even if epochs remain.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_steps: Option<u64>,
}

impl TrainConfig {
    pub fn desk() -> Self {
        Self {
            model: ModelConfig::desk(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.optimizer.validate()?;
        self.loss.validate()?;
        self.augmentation.validate()?;
        self.metrics.validate()
    }
}

/// Position in the run: `cursor` indexes the current epoch's permutation. The running
/// loss sum of the current epoch travels with it so a resumed epoch reports the same mean.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub epoch: usize,
    pub cursor: usize,
    pub step: u64,
    pub epoch_steps: u64,
    pub epoch_total: f64,
}

/// A training tile in HWC layout with its one-hot target.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSample {
    pub pixels: Raster<f32>,
    pub target: Tensor,
}

/// Crops every scene into `tile_size` tiles (reflection padded at the edges).
pub fn tile_samples(scenes: &[(SceneImage, LabelMask)], tile_size: usize) -> Result<Vec<TrainSample>> {
    let mut out = Vec::new();
    for (image, mask) in scenes {
        let grid = plan_grid(image.pixels.height(), image.pixels.width(), tile_size)?;
        let tiles = crop(&image.pixels, &grid)?;
        let labels = crop(&mask.labels, &grid)?;
        for (pixels, label) in tiles.into_iter().zip(labels) {
            out.push(TrainSample {
                pixels,
                target: encode_label(&label)?,
            });
        }
    }
    Ok(out)
}

/// `x`, `x_aug` are `[n, 3, h, w]`; `t` is `[n, 2, h, w]`. `x_aug` is absent when the
/// student term is switched off.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub x: Tensor,
    pub x_aug: Option<Tensor>,
    pub t: Tensor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Step {
        epoch: usize,
        step: u64,
        l_ce: f64,
        l_ce_aug: f64,
        total: f64,
        masked_fraction: f64,
    },
    /// Test-split means; the metric fields are absent when there is no test split.
    Epoch {
        epoch: usize,
        steps: u64,
        mean_total: f64,
        #[serde(skip_serializing_if = "Option::is_none")]
        e_ma: Option<f64>,
        #[serde(skip_serializing_if = "Option::is_none")]
        f_beta_w: Option<f64>,
        #[serde(skip_serializing_if = "Option::is_none")]
        s_measure: Option<f64>,
    },
}

impl LogRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("plain record")
    }
}

fn derived_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Sample order for one epoch.
pub fn epoch_permutation(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut derived_rng(seed, SHUFFLE_STREAM | epoch as u64));
    order
}

#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub net: HrCloudNet,
    pub store: ParamStore,
    pub adam: AdamState,
    pub progress: Progress,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let (net, store) = build_model(&config.model, config.optimizer.seed)?;
        let adam = AdamState::new(&store);
        Ok(Self {
            config,
            net,
            store,
            adam,
            progress: Progress::default(),
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        let net = ckpt.model()?;
        Ok(Self {
            config: ckpt.config,
            net,
            store: ckpt.store,
            adam: ckpt.adam,
            progress: ckpt.progress,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            store: self.store.clone(),
            adam: self.adam.clone(),
            progress: self.progress,
        }
    }

    /// Builds the batch for `indices`; the student views depend only on the seed and `step`.
    pub fn make_batch(&self, samples: &[TrainSample], indices: &[usize], step: u64) -> Result<Batch> {
        let student = self.config.model.ablation.use_aug_view_loss;
        let mut rng = derived_rng(self.config.optimizer.seed, AUGMENT_STREAM | step);
        let mut xs = Vec::with_capacity(indices.len());
        let mut augs = Vec::with_capacity(indices.len());
        let mut ts = Vec::with_capacity(indices.len());
        for &i in indices {
            let s = samples
                .get(i)
                .ok_or_else(|| Error::invalid(format!("sample index {i} out of range")))?;
            xs.push(s.pixels.to_chw());
            if student {
                let (_, aug, _) = make_view_pair(&s.pixels, &self.config.augmentation, &mut rng)?;
                augs.push(aug.to_chw());
            }
            ts.push(s.target.clone());
        }
        Ok(Batch {
            x: Tensor::stack(&xs)?,
            x_aug: if student { Some(Tensor::stack(&augs)?) } else { None },
            t: Tensor::stack(&ts)?,
        })
    }

    /// Forward both views, back-propagate the total loss, apply the teacher pass's
    /// batch-norm statistics and one Adam update.
    pub fn train_step(&mut self, batch: &Batch) -> Result<LossBreakdown> {
        let x_shape = batch.x.shape();
        if x_shape.len() != 4 || x_shape[1] != 3 {
            return Err(Error::shape(format!("batch x must be [n, 3, h, w], got {x_shape:?}")));
        }
        let expected_t = [x_shape[0], 2, x_shape[2], x_shape[3]];
        if batch.t.shape() != expected_t {
            return Err(Error::shape(format!(
                "batch target {:?} does not match x {x_shape:?}",
                batch.t.shape()
            )));
        }
        let use_student = self.config.model.ablation.use_aug_view_loss;
        match (&batch.x_aug, use_student) {
            (Some(xa), true) if xa.shape() != x_shape => {
                return Err(Error::shape(format!(
                    "student view {:?} does not match teacher view {x_shape:?}",
                    xa.shape()
                )))
            }
            (None, true) => return Err(Error::invalid("batch lacks the student view")),
            _ => {}
        }

        let (grads, bn_updates, breakdown) = {
            let mut g = Graph::new(&self.store, Mode::Train);
            let x = g.input(batch.x.clone());
            let y = self.net.forward(&mut g, x)?;
            let teacher_stats = g.take_bn_updates();
            let y_aug = match (&batch.x_aug, use_student) {
                (Some(xa), true) => {
                    let xa = g.input(xa.clone());
                    let ya = self.net.forward(&mut g, xa)?;
                    g.take_bn_updates();
                    Some(ya)
                }
                _ => None,
            };
            let (root, breakdown) = total_loss_graph(&mut g, y, y_aug, &batch.t, &self.config.loss)?;
            breakdown.check_finite()?;
            let grads = g.backward(root);
            (g.param_gradients(&grads), teacher_stats, breakdown)
        };
        for u in &bn_updates {
            u.apply(&mut self.store);
        }
        self.adam.update(&mut self.store, &grads, &self.config.optimizer)?;
        Ok(breakdown)
    }

    fn epochs_done(&self) -> bool {
        self.progress.epoch >= self.config.optimizer.epochs
    }

    fn step_budget_spent(&self) -> bool {
        self.config.max_steps.is_some_and(|m| self.progress.step >= m)
    }

    /// Runs from the current progress until the epochs (or `max_steps`) are exhausted.
    /// `on_record` sees every log record after the trainer state it describes is in place,
    /// so saving a checkpoint from it captures a resumable state.
    pub fn fit(
        &mut self,
        train: &[TrainSample],
        test: &[(SceneImage, LabelMask)],
        on_record: &mut dyn FnMut(&LogRecord, &Trainer) -> Result<()>,
    ) -> Result<Vec<LogRecord>> {
        if train.is_empty() {
            return Err(Error::invalid("the train split is empty"));
        }
        if test.is_empty() {
            log::warn!("no test scenes; epoch records carry no metrics");
        }
        let n = train.len();
        let batch_size = self.config.optimizer.batch_size;
        let mut log = Vec::new();
        while !self.epochs_done() && !self.step_budget_spent() {
            let order = epoch_permutation(self.config.optimizer.seed, self.progress.epoch, n);
            while self.progress.cursor < n && !self.step_budget_spent() {
                let end = (self.progress.cursor + batch_size).min(n);
                let batch = self.make_batch(train, &order[self.progress.cursor..end], self.progress.step)?;
                let b = self.train_step(&batch)?;
                self.progress.cursor = end;
                self.progress.step += 1;
                self.progress.epoch_total += b.total;
                self.progress.epoch_steps += 1;
                let rec = LogRecord::Step {
                    epoch: self.progress.epoch,
                    step: self.progress.step - 1,
                    l_ce: b.l_ce,
                    l_ce_aug: b.l_ce_aug,
                    total: b.total,
                    masked_fraction: b.masked_fraction,
                };
                on_record(&rec, self)?;
                log.push(rec);
            }
            if self.progress.cursor < n {
                break;
            }
            let report = if test.is_empty() { None } else { Some(self.evaluate(test)?) };
            let Progress {
                epoch,
                epoch_steps,
                epoch_total,
                ..
            } = self.progress;
            self.progress = Progress {
                epoch: epoch + 1,
                cursor: 0,
                step: self.progress.step,
                epoch_steps: 0,
                epoch_total: 0.0,
            };
            let rec = LogRecord::Epoch {
                epoch,
                steps: epoch_steps,
                mean_total: if epoch_steps > 0 { epoch_total / epoch_steps as f64 } else { f64::NAN },
                e_ma: report.as_ref().map(|r| r.mean_mae),
                f_beta_w: report.as_ref().and_then(|r| r.mean_fbeta),
                s_measure: report.as_ref().map(|r| r.mean_s_measure),
            };
            on_record(&rec, self)?;
            log.push(rec);
        }
        Ok(log)
    }

    /// Stitched-scene metrics with frozen batch-norm statistics.
    pub fn evaluate(&self, scenes: &[(SceneImage, LabelMask)]) -> Result<EvalReport> {
        evaluate_scenes(
            &self.net,
            &self.store,
            scenes,
            self.config.optimizer.batch_size,
            &self.config.metrics,
        )
    }
}

/// The default grid of loss weights swept over both lambdas.
pub const LAMBDA_GRID: [f64; 5] = [0.1, 0.25, 0.5, 0.75, 1.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub lambda1: f64,
    pub lambda2: f64,
    pub e_ma: f64,
    pub f_beta_w: Option<f64>,
    pub s_measure: f64,
    pub final_total: f64,
}

/// Trains one fresh model per `(lambda1, lambda2)` pair in `grid x grid` and scores it on
/// `test`. Every point starts from the same seed.
pub fn lambda_sweep(
    base: &TrainConfig,
    grid: &[f64],
    train: &[TrainSample],
    test: &[(SceneImage, LabelMask)],
    on_point: &mut dyn FnMut(&SweepPoint) -> Result<()>,
) -> Result<Vec<SweepPoint>> {
    if test.is_empty() {
        return Err(Error::invalid("the sweep needs a non-empty test split"));
    }
    let mut points = Vec::with_capacity(grid.len() * grid.len());
    for &lambda1 in grid {
        for &lambda2 in grid {
            let mut cfg = base.clone();
            cfg.loss.lambda1 = lambda1;
            cfg.loss.lambda2 = lambda2;
            let mut trainer = Trainer::new(cfg)?;
            let log = trainer.fit(train, &[], &mut |_, _| Ok(()))?;
            let final_total = log
                .iter()
                .rev()
                .find_map(|r| match r {
                    LogRecord::Step { total, .. } => Some(*total),
                    _ => None,
                })
                .unwrap_or(f64::NAN);
            let report = trainer.evaluate(test)?;
            let point = SweepPoint {
                lambda1,
                lambda2,
                e_ma: report.mean_mae,
                f_beta_w: report.mean_fbeta,
                s_measure: report.mean_s_measure,
                final_total,
            };
            on_point(&point)?;
            points.push(point);
        }
    }
    Ok(points)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::decoder::DecoderConfig;
    use crate::model::AblationFlags;
    use crate::synthetic::synthetic_scene;

    fn small_config(flags: AblationFlags) -> TrainConfig {
        TrainConfig {
            model: ModelConfig {
                tile_size: 32,
                backbone: BackboneConfig::tiny(2),
                decoder: DecoderConfig {
                    head_channels: 4,
                    ..DecoderConfig::default()
                },
                ablation: flags,
            },
            optimizer: OptimizerConfig {
                batch_size: 2,
                epochs: 1,
                seed: 11,
                ..OptimizerConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    fn scenes(n: usize, side: usize) -> Vec<(SceneImage, LabelMask)> {
        (0..n)
            .map(|i| synthetic_scene(side, side, 100 + i as u64, &format!("s{i}")).unwrap())
            .collect()
    }

    #[test]
    fn tile_samples_cover_every_tile() {
        let s = tile_samples(&scenes(2, 40), 32).unwrap();
        assert_eq!(s.len(), 8);
        assert_eq!(s[0].target.shape(), &[2, 32, 32]);
    }

    #[test]
    fn zero_learning_rate_leaves_parameters() {
        let mut cfg = small_config(AblationFlags::FULL);
        cfg.optimizer.learning_rate = 0.0;
        let mut tr = Trainer::new(cfg).unwrap();
        let samples = tile_samples(&scenes(2, 32), 32).unwrap();
        let before = tr.store.params().to_vec();
        let batch = tr.make_batch(&samples, &[0, 1], 0).unwrap();
        tr.train_step(&batch).unwrap();
        assert_eq!(tr.store.params(), &before[..]);
    }

    #[test]
    fn lambda2_zero_equals_student_off() {
        let samples = tile_samples(&scenes(2, 32), 32).unwrap();
        let mut on = small_config(AblationFlags::FULL);
        on.loss.lambda2 = 0.0;
        let off = small_config(AblationFlags {
            use_aug_view_loss: false,
            ..AblationFlags::FULL
        });
        let mut a = Trainer::new(on).unwrap();
        let mut b = Trainer::new(off).unwrap();
        for step in 0..2 {
            let ba = a.make_batch(&samples, &[0, 1], step).unwrap();
            let bb = b.make_batch(&samples, &[0, 1], step).unwrap();
            assert!(bb.x_aug.is_none());
            let la = a.train_step(&ba).unwrap();
            let lb = b.train_step(&bb).unwrap();
            assert_eq!(la.total, lb.total);
        }
        assert_eq!(a.store, b.store);
    }

    #[test]
    fn short_descent_with_larger_rate() {
        let mut cfg = small_config(AblationFlags::FULL);
        cfg.optimizer.learning_rate = 1e-3;
        let mut tr = Trainer::new(cfg).unwrap();
        let samples = tile_samples(&scenes(2, 32), 32).unwrap();
        let batch = tr.make_batch(&samples, &[0, 1], 0).unwrap();
        let first = tr.train_step(&batch).unwrap().total;
        let mut last = first;
        for _ in 0..15 {
            last = tr.train_step(&batch).unwrap().total;
        }
        assert!(last < first, "{first} -> {last}");
    }

    #[test]
    fn zero_epochs_is_identity() {
        let mut cfg = small_config(AblationFlags::FULL);
        cfg.optimizer.epochs = 0;
        let mut tr = Trainer::new(cfg).unwrap();
        let init = tr.store.clone();
        let log = tr.fit(&tile_samples(&scenes(1, 32), 32).unwrap(), &[], &mut |_, _| Ok(())).unwrap();
        assert!(log.is_empty());
        assert_eq!(tr.store, init);
    }

    #[test]
    fn empty_train_split_fails() {
        let mut tr = Trainer::new(small_config(AblationFlags::FULL)).unwrap();
        assert!(tr.fit(&[], &[], &mut |_, _| Ok(())).is_err());
    }

    #[test]
    fn fit_logs_steps_then_epoch_with_metrics() {
        let mut tr = Trainer::new(small_config(AblationFlags::FULL)).unwrap();
        let train = tile_samples(&scenes(3, 32), 32).unwrap();
        let test = scenes(1, 40);
        let mut seen = 0;
        let log = tr
            .fit(&train, &test, &mut |_, _| {
                seen += 1;
                Ok(())
            })
            .unwrap();
        assert_eq!(seen, log.len());
        assert_eq!(log.len(), 3);
        assert!(matches!(log[1], LogRecord::Step { step: 1, .. }));
        match &log[2] {
            LogRecord::Epoch { steps, e_ma, s_measure, .. } => {
                assert_eq!(*steps, 2);
                assert!(e_ma.is_some() && s_measure.is_some());
            }
            r => panic!("unexpected {r:?}"),
        }
        assert_eq!(
            tr.progress,
            Progress {
                epoch: 1,
                step: 2,
                ..Progress::default()
            }
        );
        let line = log[0].to_json_line();
        assert!(line.contains("\"kind\":\"step\"") && line.contains("masked_fraction"));
    }

    #[test]
    fn permutation_is_seeded_per_epoch() {
        assert_eq!(epoch_permutation(1, 0, 10), epoch_permutation(1, 0, 10));
        assert_ne!(epoch_permutation(1, 0, 10), epoch_permutation(1, 1, 10));
        let mut p = epoch_permutation(3, 2, 10);
        p.sort();
        assert_eq!(p, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn non_finite_loss_names_term() {
        let mut tr = Trainer::new(small_config(AblationFlags::FULL)).unwrap();
        let samples = tile_samples(&scenes(1, 32), 32).unwrap();
        let mut batch = tr.make_batch(&samples, &[0], 0).unwrap();
        batch.t.data_mut()[0] = f64::INFINITY;
        match tr.train_step(&batch).unwrap_err() {
            Error::NonFiniteLoss { term, .. } => assert_eq!(term, "l_ce"),
            e => panic!("unexpected {e}"),
        }
    }
}
